use std::collections::BTreeMap;

use candle_core::{Device, Tensor, D};

use crate::{ops, Error, Result};

/// Mean cross-entropy between router logits and target experts, averaged
/// over units within a block and then over blocks.
///
/// `logits[b]` is `(N_b, E)` for block `b`; `targets[b]` holds `N_b` expert
/// indices.
pub fn router_ce_loss(logits: &[Tensor], targets: &[Vec<u32>]) -> Result<Tensor> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Data("router loss needs one target list per block".into()));
    }
    let mut per_block = Vec::with_capacity(logits.len());
    for (block_logits, block_targets) in logits.iter().zip(targets) {
        let (n, e) = block_logits.dims2()?;
        if n != block_targets.len() || n == 0 {
            return Err(Error::Data(format!(
                "router logits have {n} rows but {} targets",
                block_targets.len()
            )));
        }
        if let Some(&bad) = block_targets.iter().find(|&&t| t as usize >= e) {
            return Err(Error::Data(format!("target expert {bad} outside [0, {e})")));
        }
        let idx = Tensor::from_vec(block_targets.clone(), (n, 1), &Device::Cpu)?;
        let picked = ops::log_softmax_last(block_logits)?.gather(&idx, 1)?;
        per_block.push((picked.mean_all()? * -1.0)?);
    }
    Ok(Tensor::stack(&per_block, 0)?.mean_all()?)
}

const LOG_FLOOR: f64 = 1e-30;

/// Mutual information between domain labels and experts for one block,
/// from per-example routing distributions `probs` of shape `(B, E)`.
///
/// `p(e|dom)` is the mean routing distribution of the domain's examples,
/// `p(dom)` the empirical domain frequency and `p(e) = Σ p(dom) p(e|dom)`.
pub fn mutual_information(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, _) = probs.dims2()?;
    if b == 0 {
        return Err(Error::Data("mutual information over an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Data(format!("{b} routing rows but {} labels", labels.len())));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    let domains = members.len();
    let mut averaging = vec![0.0f64; domains * b];
    let mut prior = Vec::with_capacity(domains);
    for (row, rows) in members.values().enumerate() {
        for &i in rows {
            averaging[row * b + i] = 1.0 / rows.len() as f64;
        }
        prior.push(rows.len() as f64 / b as f64);
    }
    let dtype = probs.dtype();
    let averaging = ops::tensor_from_f64(averaging, &[domains, b], dtype, &Device::Cpu)?;
    let prior = ops::tensor_from_f64(prior, &[domains, 1], dtype, &Device::Cpu)?;

    let conditional = averaging.matmul(probs)?; // (D, E)
    let marginal = prior.t()?.matmul(&conditional)?; // (1, E)
    let log_ratio = conditional
        .clamp(LOG_FLOOR, f64::INFINITY)?
        .log()?
        .broadcast_sub(&marginal.clamp(LOG_FLOOR, f64::INFINITY)?.log()?)?;
    let per_domain = (conditional * log_ratio)?.sum_keepdim(D::Minus1)?; // (D, 1)
    Ok((per_domain * prior)?.sum_all()?)
}

/// `-λ · MI`, averaged over blocks. Minimizing it pushes each domain towards
/// its own experts.
pub fn mutual_information_loss(probs: &[Tensor], labels: &[usize], weight: f64) -> Result<Tensor> {
    if probs.is_empty() {
        return Err(Error::Data("no routing distributions given".into()));
    }
    let per_block = probs
        .iter()
        .map(|p| mutual_information(p, labels))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&per_block, 0)?.mean_all()? * -weight)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(data, (rows.len(), rows[0].len()), &Device::Cpu).unwrap()
    }

    #[test]
    fn ce_of_uniform_two_way_logits_is_ln2() {
        let loss = router_ce_loss(&[t2(&[&[0.0, 0.0]])], &[vec![1]]).unwrap();
        assert!((ops::scalar_f64(&loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_of_confident_correct_logits_is_zero() {
        let loss = router_ce_loss(&[t2(&[&[0.0, 100.0, 0.0]])], &[vec![1]]).unwrap();
        assert!(ops::scalar_f64(&loss).unwrap() < 1e-40);
    }

    #[test]
    fn ce_rejects_out_of_range_target() {
        assert!(router_ce_loss(&[t2(&[&[0.0, 0.0]])], &[vec![2]]).is_err());
    }

    #[test]
    fn independent_routing_has_zero_information() {
        let p = t2(&[&[0.7, 0.3], &[0.7, 0.3], &[0.7, 0.3]]);
        let mi = ops::scalar_f64(&mutual_information(&p, &[0, 1, 1]).unwrap()).unwrap();
        assert!(mi.abs() < 1e-15);
    }

    #[test]
    fn perfect_correspondence_reaches_ln2() {
        let p = t2(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let loss = mutual_information_loss(&[p], &[0, 1, 0, 1], 0.5).unwrap();
        let v = ops::scalar_f64(&loss).unwrap();
        assert!((v + 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = Tensor::zeros((0, 2), candle_core::DType::F64, &Device::Cpu).unwrap();
        assert!(mutual_information(&p, &[]).is_err());
    }
}
