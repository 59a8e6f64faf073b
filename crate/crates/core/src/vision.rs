//! Small ViT encoder exposing penultimate-block patch features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::nn::{block_specs, linear_specs, Binder};
use crate::params::{ParamSpec, Params};
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

pub const PREFIX: &str = "vision.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_size: 8,
            d_vision: 64,
            n_layers: 3,
            n_heads: 4,
            d_ff: 256,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "vision n_layers must be >= 2 for a penultimate layer, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || !self.d_vision.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "vision n_heads {} does not divide d_vision {}",
                self.n_heads, self.d_vision
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("vision d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let n = self.image_side / self.patch_size;
        n * n
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// 1-based index of the block whose output is returned.
    pub fn feature_layer(&self) -> usize {
        self.n_layers - 1
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut v = linear_specs("vision.patch_embed", self.patch_dim(), self.d_vision, true);
        v.push(ParamSpec::normal("vision.pos_embed", &[self.num_patches(), self.d_vision]));
        for i in 0..self.n_layers {
            v.extend(block_specs(&format!("vision.blocks.{i}"), self.d_vision, self.d_ff));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub tokens: Tensor,
    /// 1-based block index the tokens were taken after.
    pub layer: usize,
}

/// Non-overlapping `patch_size`² patches in row-major order, pixels scaled
/// by 1/255.
pub fn patchify<F: Element>(image: &GrayImage, patch_size: usize) -> Result<Tensor<F>> {
    let (w, h) = (image.width(), image.height());
    if patch_size == 0 || w != h || w % patch_size != 0 {
        return Err(Error::Config(format!(
            "a {w}x{h} image cannot be cut into {patch_size}x{patch_size} patches"
        )));
    }
    let n = w / patch_size;
    let mut data = Vec::with_capacity(w * h);
    for py in 0..n {
        for px in 0..n {
            for y in 0..patch_size {
                for x in 0..patch_size {
                    let v = image.get(px * patch_size + x, py * patch_size + y);
                    data.push(F::of(v as f64 / 255.0));
                }
            }
        }
    }
    Ok(Tensor::new(&[n * n, patch_size * patch_size], data)?)
}

/// Patch embedding plus blocks `0..n_layers-1`; the final block and any
/// final norm are never evaluated.
pub fn encode_graph<F: Element>(
    b: &mut Binder<'_, F>,
    g: &mut Graph<F>,
    cfg: &VisionConfig,
    patches: Var,
) -> Result<Var> {
    if g.shape(patches) != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(Error::Tensor(crate::TensorError::Shape {
            op: "encode",
            lhs: g.shape(patches).to_vec(),
            rhs: vec![cfg.num_patches(), cfg.patch_dim()],
        }));
    }
    let x = b.linear(g, patches, "vision.patch_embed")?;
    let pos = b.var(g, "vision.pos_embed")?;
    let mut x = g.add(x, pos)?;
    for i in 0..cfg.feature_layer() {
        x = b.block(g, x, &format!("vision.blocks.{i}"), cfg.n_heads, false)?;
    }
    Ok(x)
}

pub fn encode(image: &GrayImage, cfg: &VisionConfig, weights: &Params) -> Result<PatchFeatures> {
    cfg.validate()?;
    if image.width() != cfg.image_side || image.height() != cfg.image_side {
        return Err(Error::Config(format!(
            "encoder expects {0}x{0} input, got {1}x{2}",
            cfg.image_side,
            image.width(),
            image.height()
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(weights);
    let p = g.constant(patchify(image, cfg.patch_size)?);
    let out = encode_graph(&mut b, &mut g, cfg, p)?;
    Ok(PatchFeatures {
        tokens: g.value(out).clone(),
        layer: cfg.feature_layer(),
    })
}

/// Every encoder parameter is frozen in both stages.
pub fn freeze_flags<F: Element>(weights: &Params<F>) -> BTreeMap<String, bool> {
    weights
        .names()
        .filter(|n| n.starts_with(PREFIX))
        .map(|n| (n.clone(), true))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{stream_rng, Stream};

    fn tiny() -> VisionConfig {
        VisionConfig {
            image_side: 8,
            patch_size: 4,
            d_vision: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
        }
    }

    fn weights(cfg: &VisionConfig, seed: u64) -> Params {
        Params::from_specs(&cfg.specs(), &mut stream_rng(seed, Stream::Init))
    }

    #[test]
    fn patch_layout_and_scaling() {
        let img = GrayImage::from_fn(4, 4, |x, y| (y * 4 + x) as u8);
        let p: Tensor<f64> = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        let want: Vec<f64> = [2.0, 3.0, 6.0, 7.0].iter().map(|v| v / 255.0).collect();
        assert_eq!(p.row(1), want.as_slice());
        let white: Tensor<f32> = patchify(&GrayImage::from_fn(4, 4, |_, _| 255), 2).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        assert!(patchify::<f32>(&img, 3).is_err());
    }

    #[test]
    fn output_shape_and_layer() {
        let cfg = tiny();
        let f = encode(&GrayImage::from_fn(8, 8, |x, _| x as u8 * 20), &cfg, &weights(&cfg, 1)).unwrap();
        assert_eq!(f.tokens.shape(), &[4, 8]);
        assert_eq!(f.layer, 1);
    }

    #[test]
    fn final_block_never_matters() {
        let cfg = tiny();
        let img = GrayImage::from_fn(8, 8, |x, y| (x * y) as u8);
        let w = weights(&cfg, 2);
        let mut w2 = w.clone();
        for t in w2.iter().filter(|(n, _)| n.starts_with("vision.blocks.1.")).map(|(n, _)| n.clone()).collect::<Vec<_>>() {
            for v in w2.get_mut(&t).unwrap().data_mut() {
                *v += 0.5;
            }
        }
        assert_eq!(encode(&img, &cfg, &w).unwrap(), encode(&img, &cfg, &w2).unwrap());
    }

    #[test]
    fn zeroed_blocks_give_embedding_plus_position() {
        let cfg = tiny();
        let mut w = weights(&cfg, 3);
        let names: Vec<String> = w.names().filter(|n| n.contains(".blocks.")).cloned().collect();
        for n in names {
            w.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let img = GrayImage::from_fn(8, 8, |x, y| (x + 3 * y) as u8);
        let f = encode(&img, &cfg, &w).unwrap();
        let p: Tensor<f32> = patchify(&img, 4).unwrap();
        let we = w.get("vision.patch_embed.weight").unwrap();
        let pos = w.get("vision.pos_embed").unwrap();
        for i in 0..4 {
            for j in 0..8 {
                let dot: f32 = (0..16).map(|k| p.row(i)[k] * we.row(j)[k]).sum();
                let want = dot + pos.row(i)[j];
                assert!((f.tokens.row(i)[j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn one_patch_change_moves_that_patch() {
        let cfg = tiny();
        for seed in 0..5 {
            let w = weights(&cfg, seed);
            let a = GrayImage::from_fn(8, 8, |x, y| (x * 7 + y * 3) as u8);
            let b = GrayImage::from_fn(8, 8, |x, y| if x >= 4 && y < 4 { 200 } else { (x * 7 + y * 3) as u8 });
            let fa = encode(&a, &cfg, &w).unwrap();
            let fb = encode(&b, &cfg, &w).unwrap();
            assert_ne!(fa.tokens.row(1), fb.tokens.row(1));
        }
    }

    #[test]
    fn config_validation() {
        assert!(VisionConfig { n_layers: 1, ..tiny() }.validate().is_err());
        assert!(VisionConfig { patch_size: 3, ..tiny() }.validate().is_err());
        assert!(VisionConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(VisionConfig::default().validate().is_ok());
        let w = weights(&tiny(), 0);
        assert!(freeze_flags(&w).values().all(|&f| f));
        assert_eq!(freeze_flags(&w).len(), w.len());
    }
}
