use candle_core::{DType, Device, Tensor, Var};

use crate::{ops, Error, Result};

/// Learnable similarity scale `t > 0`, stored as `ln t`.
#[derive(Debug, Clone)]
pub struct TemperatureParam {
    log_scale: Var,
}

impl TemperatureParam {
    pub fn new(initial: f64, dtype: DType) -> Result<Self> {
        if !(initial > 0.0 && initial.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let t = ops::tensor_from_f64(vec![initial.ln()], &[], dtype, &Device::Cpu)?;
        Ok(Self {
            log_scale: Var::from_tensor(&t)?,
        })
    }

    pub(crate) fn from_log_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            log_scale: Var::from_tensor(&t.detach().copy()?.reshape(())?)?,
        })
    }

    pub fn var(&self) -> &Var {
        &self.log_scale
    }

    /// `t = exp(ln t)` as a differentiable scalar tensor.
    pub fn scale(&self) -> Result<Tensor> {
        Ok(self.log_scale.as_tensor().exp()?)
    }

    pub fn value(&self) -> Result<f64> {
        Ok(ops::scalar_f64(self.log_scale.as_tensor())?.exp())
    }
}

/// In-batch contrastive loss over temperature-scaled dot products.
///
/// Row `i` of `left` is paired with row `i` of `right`; every other row of
/// `right` acts as a negative. Returns the mean cross-entropy of
/// `softmax_j(t · leftᵢ·rightⱼ)` against target `i`.
pub fn mnr_loss(left: &Tensor, right: &Tensor, temperature: &TemperatureParam) -> Result<Tensor> {
    let (b, d) = left.dims2()?;
    if right.dims2()? != (b, d) {
        return Err(Error::Data("left and right embeddings differ in shape".into()));
    }
    if b < 2 {
        return Err(Error::Data("contrastive loss needs at least two pairs".into()));
    }
    let logits = left
        .matmul(&right.t()?)?
        .broadcast_mul(&temperature.scale()?.to_dtype(left.dtype())?)?;
    let diag = Tensor::arange(0u32, b as u32, &Device::Cpu)?.reshape((b, 1))?;
    let picked = ops::log_softmax_last(&logits)?.gather(&diag, 1)?;
    Ok((picked.mean_all()? * -1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(data: &[&[f64]]) -> Tensor {
        let flat: Vec<f64> = data.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (data.len(), data[0].len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_embeddings_give_ln_b() {
        let t = TemperatureParam::new(1.0 / 0.07, DType::F64).unwrap();
        let e = rows(&vec![&[0.3, -0.2, 0.5][..]; 20]);
        let loss = ops::scalar_f64(&mnr_loss(&e, &e, &t).unwrap()).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-12);
        assert!((loss - 2.996).abs() < 1e-3);
    }

    #[test]
    fn orthonormal_pairs_at_high_temperature_are_near_zero() {
        let t = TemperatureParam::new(100.0, DType::F64).unwrap();
        let e = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = ops::scalar_f64(&mnr_loss(&e, &e, &t).unwrap()).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn single_pair_is_rejected() {
        let t = TemperatureParam::new(1.0, DType::F64).unwrap();
        let e = rows(&[&[1.0, 0.0]]);
        assert!(mnr_loss(&e, &e, &t).is_err());
    }

    #[test]
    fn temperature_round_trips_through_log() {
        let t = TemperatureParam::new(14.285714, DType::F32).unwrap();
        assert!((t.value().unwrap() - 14.285714).abs() < 1e-4);
        assert!(TemperatureParam::new(0.0, DType::F32).is_err());
    }
}
