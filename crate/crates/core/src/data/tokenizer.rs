//! Byte-level tokenizer: ids 0..=255 are raw bytes, 256..=259 are reserved.

pub const PAD_ID: u32 = 256;
pub const BOS_ID: u32 = 257;
pub const EOS_ID: u32 = 258;
pub const IMAGE_ID: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub const IMAGE_TAG: &str = "<image>";

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Like [`tokenize`], but every literal `<image>` becomes the single
/// placeholder id.
pub fn tokenize_template(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len());
    let mut parts = text.split(IMAGE_TAG).peekable();
    while let Some(part) = parts.next() {
        out.extend(tokenize(part));
        if parts.peek().is_some() {
            out.push(IMAGE_ID);
        }
    }
    out
}

fn tag(id: u32) -> Option<&'static str> {
    match id {
        PAD_ID => Some("<pad>"),
        BOS_ID => Some("<bos>"),
        EOS_ID => Some("<eos>"),
        IMAGE_ID => Some(IMAGE_TAG),
        _ => None,
    }
}

/// Raw bytes; reserved ids render as their literal tags and ids outside the
/// vocabulary as `<unk>`.
pub fn detokenize_bytes(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            out.push(id as u8);
        } else {
            out.extend_from_slice(tag(id).unwrap_or("<unk>").as_bytes());
        }
    }
    out
}

pub fn detokenize(ids: &[u32]) -> String {
    String::from_utf8_lossy(&detokenize_bytes(ids)).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_map_to_ids() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
    }

    #[test]
    fn round_trip() {
        let s = "Pleural effusion.\n";
        assert_eq!(detokenize(&tokenize(s)), s);
    }

    #[test]
    fn template_placeholder_is_single_id() {
        let ids = tokenize_template("x <image>\ny");
        assert_eq!(ids.iter().filter(|&&i| i == IMAGE_ID).count(), 1);
        assert_eq!(ids.len(), "x ".len() + 1 + "\ny".len());
        assert_eq!(tokenize_template("<image>"), vec![IMAGE_ID]);
        // plain tokenisation keeps the seven bytes
        assert_eq!(tokenize("<image>").len(), 7);
    }

    #[test]
    fn reserved_ids_render_as_tags() {
        assert_eq!(detokenize(&[104, IMAGE_ID, EOS_ID]), "h<image><eos>");
    }
}
