//! Training objectives.
//!
//! The global critic uses a relativistic average discriminator whose sigmoid
//! is replaced by least-squares targets: `d_ra(a, b) = C(a) - mean(C(b))`,
//! pushed towards 1 for the favoured side and 0 for the other. The local
//! critic uses plain LSGAN targets. The self feature preserving (SFP) loss
//! compares instance-normalized perceptual features of the input and its
//! enhancement.

mod perceptual;

use candle_core::{DType, Tensor};

pub use perceptual::{ExtractorConfig, FeatureExtractor, PerceptualFeatures, Tap};

use crate::error::{Error, Result};
use crate::raster::Image;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

fn non_empty(t: &Tensor, what: &'static str) -> Result<()> {
    if t.elem_count() == 0 {
        return Err(Error::EmptyBatch(what));
    }
    Ok(())
}

/// Relativistic score of each `a` against the mean of `b` (no sigmoid).
pub fn d_ra(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    non_empty(a, "relativistic scores")?;
    non_empty(b, "relativistic reference scores")?;
    Ok(a.flatten_all()?.broadcast_sub(&b.flatten_all()?.mean_all()?)?)
}

/// `E[(d_ra(real, fake) - 1)^2] + E[d_ra(fake, real)^2]`
pub fn global_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let real_rel = d_ra(real, fake)?;
    let fake_rel = d_ra(fake, real)?;
    Ok((real_rel.affine(1.0, -1.0)?.sqr()?.mean_all()? + fake_rel.sqr()?.mean_all()?)?)
}

/// `E[(d_ra(fake, real) - 1)^2] + E[d_ra(real, fake)^2]`
pub fn global_g_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let real_rel = d_ra(real, fake)?;
    let fake_rel = d_ra(fake, real)?;
    Ok((fake_rel.affine(1.0, -1.0)?.sqr()?.mean_all()? + real_rel.sqr()?.mean_all()?)?)
}

/// `E[(D(real) - 1)^2] + E[D(fake)^2]` over all patch scores.
pub fn local_d_loss(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    non_empty(real, "real patch scores")?;
    non_empty(fake, "fake patch scores")?;
    Ok((real.affine(1.0, -1.0)?.sqr()?.mean_all()? + fake.sqr()?.mean_all()?)?)
}

/// `E[(D(fake) - 1)^2]`
pub fn local_g_loss(fake: &Tensor) -> Result<Tensor> {
    non_empty(fake, "fake patch scores")?;
    Ok(fake.affine(1.0, -1.0)?.sqr()?.mean_all()?)
}

/// Per-sample, per-channel standardization of a `B x C x H x W` tensor.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?)
}

/// SFP distance between two feature tensors: mean squared difference of the
/// instance-normalized activations, i.e. the per-channel sum over the
/// `W x H` grid scaled by `1 / (W H)` and averaged over channels and batch.
pub fn sfp_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "feature shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    a.dims4()?;
    Ok(instance_norm(a)?.sub(&instance_norm(b)?)?.sqr()?.mean_all()?)
}

/// SFP loss between signed `B x 3 x H x W` batches.
pub fn sfp_loss(extractor: &FeatureExtractor, low: &Tensor, enhanced: &Tensor) -> Result<Tensor> {
    if low.dims() != enhanced.dims() {
        return Err(Error::Shape(format!(
            "sfp inputs differ: {:?} vs {:?}",
            low.dims(),
            enhanced.dims()
        )));
    }
    sfp_distance(&extractor.forward(low)?, &extractor.forward(enhanced)?)
}

pub fn sfp_loss_images(extractor: &FeatureExtractor, low: &Image, enhanced: &Image) -> Result<f64> {
    if (low.height(), low.width()) != (enhanced.height(), enhanced.width()) {
        return Err(Error::Shape("sfp images differ in size".into()));
    }
    let a = extractor.extract(low)?;
    let b = extractor.extract(enhanced)?;
    scalar(&sfp_distance(&a.activation, &b.activation)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// The four generator objectives, each a scalar tensor.
#[derive(Clone, Debug)]
pub struct GeneratorLossParts {
    pub sfp_global: Tensor,
    pub sfp_local: Tensor,
    pub adv_global: Tensor,
    pub adv_local: Tensor,
}

impl GeneratorLossParts {
    pub fn values(&self) -> Result<[f64; 4]> {
        Ok([
            scalar(&self.sfp_global)?,
            scalar(&self.sfp_local)?,
            scalar(&self.adv_global)?,
            scalar(&self.adv_local)?,
        ])
    }
}

/// Unweighted sum of the generator objectives.
pub fn total_g_loss(parts: &GeneratorLossParts) -> Result<Tensor> {
    let names = ["sfp_global", "sfp_local", "adv_global", "adv_local"];
    for (name, v) in names.iter().zip(parts.values()?) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("generator loss term {name}")));
        }
    }
    Ok((((&parts.sfp_global + &parts.sfp_local)? + &parts.adv_global)? + &parts.adv_local)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn v(x: &Tensor) -> Vec<f64> {
        x.to_vec1().unwrap()
    }

    #[test]
    fn d_ra_examples() {
        assert_eq!(v(&d_ra(&t(&[0.3]), &t(&[0.3])).unwrap()), vec![0.0]);
        assert_eq!(v(&d_ra(&t(&[0.75]), &t(&[0.25])).unwrap()), vec![0.5]);
        assert_eq!(v(&d_ra(&t(&[1.0, 3.0]), &t(&[2.0])).unwrap()), vec![-1.0, 1.0]);
        assert!(matches!(d_ra(&t(&[]), &t(&[1.0])), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn d_ra_is_antisymmetric_for_singletons() {
        for (a, b) in [(0.1, 0.9), (-3.0, 2.5), (4.0, 4.0)] {
            let ab = v(&d_ra(&t(&[a]), &t(&[b])).unwrap())[0];
            let ba = v(&d_ra(&t(&[b]), &t(&[a])).unwrap())[0];
            assert_eq!(ab, -ba);
        }
    }

    #[test]
    fn local_losses() {
        let ones = t(&[1.0; 5]);
        let zeros = t(&[0.0; 5]);
        let halves = t(&[0.5; 5]);
        assert_eq!(scalar(&local_d_loss(&ones, &zeros).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&local_d_loss(&zeros, &zeros).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&local_d_loss(&halves, &halves).unwrap()).unwrap(), 0.5);
        assert_eq!(scalar(&local_g_loss(&ones).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&local_g_loss(&zeros).unwrap()).unwrap(), 1.0);
        assert_eq!(scalar(&local_g_loss(&halves).unwrap()).unwrap(), 0.25);
        assert!(local_g_loss(&t(&[])).is_err());
    }

    #[test]
    fn total_is_unweighted_sum() {
        let parts = GeneratorLossParts {
            sfp_global: t(&[0.5]).squeeze(0).unwrap(),
            sfp_local: t(&[0.25]).squeeze(0).unwrap(),
            adv_global: t(&[1.0]).squeeze(0).unwrap(),
            adv_local: t(&[0.25]).squeeze(0).unwrap(),
        };
        assert_eq!(scalar(&total_g_loss(&parts).unwrap()).unwrap(), 2.0);
        let bad = GeneratorLossParts {
            adv_local: t(&[f64::NAN]).squeeze(0).unwrap(),
            ..parts
        };
        assert!(matches!(total_g_loss(&bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sfp_distance_rejects_mismatched_shapes() {
        let a = Tensor::zeros((1, 2, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(sfp_distance(&a, &b).is_err());
    }
}
