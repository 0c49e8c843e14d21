//! Residual template fusion: combine initial-exemplar and update-sample
//! template features into one tracking template.
//!
//! Per pyramid level the two 7x7 feature blocks are concatenated along
//! channels and pushed through a 1x1 bottleneck (2C -> C -> C/2 -> C, ReLU
//! after the first two layers); the result is added to the exemplar
//! features. The final layer starts zero-initialized, so an untrained
//! fusion is exactly the identity on the exemplar, so updating disabled
//! and updating enabled start out bit-identical.

use crate::backbone::{TemplateSet, TemplateTag, Templates};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Ctx, NormalSampler, ParamGroup, ParamId, ParamStore, Tensor};

#[derive(Debug)]
struct FusionLevel {
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
}

/// Per-level fusion parameters (the two levels do not share weights).
#[derive(Debug)]
pub struct Fusion {
    levels: [FusionLevel; 2],
    channels: usize,
}

impl Fusion {
    pub fn init(channels: usize, ps: &mut ParamStore, sampler: &mut NormalSampler) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::InvalidConfig(
                "fusion channel count must be positive and even".into(),
            ));
        }
        let one = ConvSpec::unit(1);
        let mid = channels / 2;
        let mut mk_level = |li: usize| {
            let name = format!("fusion.level{li}");
            let conv1 = Conv::init(
                ps,
                sampler,
                &format!("{name}.conv1"),
                2 * channels,
                channels,
                one,
                true,
                ParamGroup::Head,
            );
            let conv2 = Conv::init(
                ps,
                sampler,
                &format!("{name}.conv2"),
                channels,
                mid,
                one,
                true,
                ParamGroup::Head,
            );
            let conv3 = Conv::init(
                ps,
                sampler,
                &format!("{name}.conv3"),
                mid,
                channels,
                one,
                true,
                ParamGroup::Head,
            );
            // Residual start: the last layer contributes nothing until
            // training moves it.
            ps.get_mut(conv3.w).data_mut().fill(0.0);
            FusionLevel { conv1, conv2, conv3 }
        };
        Ok(Fusion {
            levels: [mk_level(0), mk_level(1)],
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Parameter ids of the zero-initialized final layers (weight, bias per
    /// level), exposed for the gradient-check harness.
    pub fn final_layer_params(&self) -> Vec<ParamId> {
        self.levels
            .iter()
            .flat_map(|l| [l.conv3.w, l.conv3.b.expect("conv3 has bias")])
            .collect()
    }

    /// Fused template: per level `zf + M(concat(zf, uf))`.
    /// Concatenation order is fixed: exemplar first, update sample second.
    pub fn fuse(&self, ctx: &mut Ctx, zf: &Templates, uf: &Templates) -> Result<Templates> {
        let mut out = [zf.levels[0]; 2];
        for li in 0..2 {
            let zs = ctx.g.value(zf.levels[li]).shape().to_vec();
            let us = ctx.g.value(uf.levels[li]).shape().to_vec();
            if zs != us {
                return Err(Error::ShapeMismatch(format!(
                    "fusion level {li}: exemplar {zs:?} vs update {us:?}"
                )));
            }
            if zs[0] != self.channels {
                return Err(Error::ShapeMismatch(format!(
                    "fusion level {li}: expected {} channels, got {}",
                    self.channels, zs[0]
                )));
            }
            let level = &self.levels[li];
            let cat = ctx.g.concat_channels(zf.levels[li], uf.levels[li]);
            let h1 = level.conv1.forward(ctx, cat);
            let h1 = ctx.g.relu(h1);
            let h2 = level.conv2.forward(ctx, h1);
            let h2 = ctx.g.relu(h2);
            let r = level.conv3.forward(ctx, h2);
            out[li] = ctx.g.add(zf.levels[li], r);
        }
        Ok(Templates { levels: out })
    }

    /// Convenience over detached template sets (tracker refresh path).
    pub fn fuse_detached(
        &self,
        ctx: &mut Ctx,
        zf: &TemplateSet,
        uf: &TemplateSet,
    ) -> Result<TemplateSet> {
        let zn = zf.insert(ctx);
        let un = uf.insert(ctx);
        let fused = self.fuse(ctx, &zn, &un)?;
        Ok(fused.detach(ctx, TemplateTag::Fused))
    }
}

/// Test-support: overwrite the zero-initialized final layers with random
/// values so gradients flow through the whole bottleneck.
pub fn randomize_final_layers(fusion: &Fusion, ps: &mut ParamStore, sampler: &mut NormalSampler) {
    for id in fusion.final_layer_params() {
        let shape = ps.get(id).shape().to_vec();
        let t = if shape.len() == 4 {
            sampler.conv_weight(&shape)
        } else {
            let n: usize = shape.iter().product();
            Tensor::from_vec(&shape, (0..n).map(|_| sampler.sample() * 0.1).collect())
        };
        *ps.get_mut(id) = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TemplateTag;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_template(rng: &mut ChaCha8Rng, c: usize, tag: TemplateTag) -> TemplateSet {
        let mut mk = || {
            let n = c * 49;
            Tensor::from_vec(&[c, 7, 7], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        TemplateSet { levels: [mk(), mk()], tag }
    }

    #[test]
    fn zero_initialized_fusion_is_identity_on_exemplar() {
        let mut ps = ParamStore::new();
        let mut sampler = NormalSampler::new(3);
        let fusion = Fusion::init(16, &mut ps, &mut sampler).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let zf = rand_template(&mut rng, 16, TemplateTag::Initial);
            let uf = rand_template(&mut rng, 16, TemplateTag::Update);
            let mut ctx = Ctx::eval(&ps);
            let fused = fusion.fuse_detached(&mut ctx, &zf, &uf).unwrap();
            // Bitwise: adding an exactly-zero residual preserves every bit.
            assert_eq!(fused.levels[0], zf.levels[0]);
            assert_eq!(fused.levels[1], zf.levels[1]);
            assert_eq!(fused.tag, TemplateTag::Fused);
        }
    }

    #[test]
    fn nonzero_final_layer_reacts_to_update_sample() {
        let mut ps = ParamStore::new();
        let mut sampler = NormalSampler::new(3);
        let fusion = Fusion::init(16, &mut ps, &mut sampler).unwrap();
        randomize_final_layers(&fusion, &mut ps, &mut sampler);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zf = rand_template(&mut rng, 16, TemplateTag::Initial);
        let uf1 = rand_template(&mut rng, 16, TemplateTag::Update);
        let mut uf2 = uf1.clone();
        uf2.levels[0].data_mut()[17] += 0.5;

        let mut ctx = Ctx::eval(&ps);
        let a = fusion.fuse_detached(&mut ctx, &zf, &uf1).unwrap();
        let b = fusion.fuse_detached(&mut ctx, &zf, &uf2).unwrap();
        assert!(a.levels[0].max_abs_diff(&b.levels[0]) > 0.0, "update sample must matter");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ps = ParamStore::new();
        let mut sampler = NormalSampler::new(3);
        let fusion = Fusion::init(16, &mut ps, &mut sampler).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zf = rand_template(&mut rng, 16, TemplateTag::Initial);
        let uf = rand_template(&mut rng, 8, TemplateTag::Update);
        let mut ctx = Ctx::eval(&ps);
        assert!(fusion.fuse_detached(&mut ctx, &zf, &uf).is_err());
    }

    #[test]
    fn output_shape_is_c_7_7_per_level() {
        let mut ps = ParamStore::new();
        let mut sampler = NormalSampler::new(3);
        let fusion = Fusion::init(16, &mut ps, &mut sampler).unwrap();
        randomize_final_layers(&fusion, &mut ps, &mut sampler);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zf = rand_template(&mut rng, 16, TemplateTag::Initial);
        let uf = rand_template(&mut rng, 16, TemplateTag::Update);
        let mut ctx = Ctx::eval(&ps);
        let fused = fusion.fuse_detached(&mut ctx, &zf, &uf).unwrap();
        assert_eq!(fused.levels[0].chw(), (16, 7, 7));
        assert_eq!(fused.levels[1].chw(), (16, 7, 7));
    }
}
