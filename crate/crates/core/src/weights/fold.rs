//! Batch-norm folding and test-time perturbation of norm statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{BatchNorm, BN_EPS};
use crate::tensor::Tensor;

use super::store::WeightStore;

const BN_FIELDS: [&str; 4] = ["gamma", "beta", "mean", "var"];

fn bn_group(store: &WeightStore, prefix: &str, eps: f32) -> Result<BatchNorm> {
    let get = |f: &str| {
        store
            .get(&format!("{prefix}.{f}"))
            .cloned()
            .ok_or_else(|| Error::Data(format!("batch norm {prefix:?} is missing {f}")))
    };
    Ok(BatchNorm {
        gamma: get("gamma")?,
        beta: get("beta")?,
        mean: get("mean")?,
        var: get("var")?,
        eps,
    })
}

/// Splits `name` into `(group prefix, field)` when it is a norm tensor that
/// folding removes.
fn foldable_norm(name: &str) -> Option<(&str, &str)> {
    let (prefix, field) = name.rsplit_once('.')?;
    if !BN_FIELDS.contains(&field) {
        return None;
    }
    (prefix.ends_with(".bn") || prefix.ends_with(".pw.prenorm")).then_some((prefix, field))
}

/// Only the point-wise projection's prenorm folds; the value branch's
/// `dw.prenorm` feeds a padded 3x3 convolution where folding is inexact.
fn has_pw_prenorm(store: &WeightStore, owner: &str) -> bool {
    owner.ends_with(".pw") && store.contains(&format!("{owner}.prenorm.gamma"))
}

/// Folds every `P.bn` group into the preceding convolution `P.w` (adding
/// `P.b`), and every attention `pw.prenorm` group into the point-wise
/// projection that follows it, using the default epsilon.
pub fn fold_batchnorm(store: &WeightStore) -> Result<WeightStore> {
    fold_batchnorm_eps(store, BN_EPS)
}

pub fn fold_batchnorm_eps(store: &WeightStore, eps: f32) -> Result<WeightStore> {
    for name in store.names() {
        if let Some((prefix, _)) = foldable_norm(name) {
            let owner = prefix.strip_suffix(".bn").unwrap_or(prefix.trim_end_matches(".prenorm"));
            if !store.contains(&format!("{owner}.w")) {
                return Err(Error::Data(format!("norm group {prefix:?} has no convolution {owner}.w")));
            }
            bn_group(store, prefix, eps)?;
        }
    }

    let mut out = WeightStore::new();
    for (name, t) in store.iter() {
        if foldable_norm(name).is_some() {
            continue;
        }
        let Some(owner) = name.strip_suffix(".w") else {
            if let Some(owner) = name.strip_suffix(".b") {
                if has_pw_prenorm(store, owner) || store.contains(&format!("{owner}.bn.gamma")) {
                    continue; // emitted together with the weight
                }
            }
            out.insert(name, t.clone())?;
            continue;
        };
        let bn_prefix = format!("{owner}.bn");
        let prenorm = format!("{owner}.prenorm");
        if store.contains(&format!("{bn_prefix}.gamma")) {
            let (w, b) = fold_after(t, store.get(&format!("{owner}.b")), &bn_group(store, &bn_prefix, eps)?)?;
            out.insert(name, w)?;
            out.insert(format!("{owner}.b"), b)?;
        } else if has_pw_prenorm(store, owner) {
            let bias = store
                .get(&format!("{owner}.b"))
                .ok_or_else(|| Error::Data(format!("{owner} has a prenorm but no bias")))?;
            let (w, b) = fold_before(t, bias, &bn_group(store, &prenorm, eps)?)?;
            out.insert(name, w)?;
            out.insert(format!("{owner}.b"), b)?;
        } else {
            out.insert(name, t.clone())?;
        }
    }
    Ok(out)
}

/// `BN(conv(x))` -> conv with `w * s` and `b = s * b0 + t`.
fn fold_after(w: &Tensor, b0: Option<&Tensor>, bn: &BatchNorm) -> Result<(Tensor, Tensor)> {
    let c_out = w.shape()[0];
    if bn.channels() != c_out || b0.is_some_and(|b| b.numel() != c_out) {
        return Err(Error::shape("fold_batchnorm", w.shape(), bn.gamma.shape()));
    }
    let (scale, shift) = bn.scale_shift()?;
    let per = w.numel() / c_out;
    let mut wf = w.clone();
    for (row, s) in wf.data_mut().chunks_mut(per).zip(&scale) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    let b = (0..c_out)
        .map(|o| shift[o] + scale[o] * b0.map_or(0.0, |b| b.data()[o]))
        .collect();
    Ok((wf, Tensor::new(vec![c_out], b)?))
}

/// `conv(BN(x))` for a 1x1 convolution -> `w[o, i] * s[i]` and
/// `b[o] + sum_i w[o, i] * t[i]`.
fn fold_before(w: &Tensor, b0: &Tensor, bn: &BatchNorm) -> Result<(Tensor, Tensor)> {
    let [c_out, c_in, kh, kw] = w.dims4("fold_batchnorm")?;
    if kh != 1 || kw != 1 || bn.channels() != c_in || b0.numel() != c_out {
        return Err(Error::shape("fold_batchnorm", w.shape(), bn.gamma.shape()));
    }
    let (scale, shift) = bn.scale_shift()?;
    let mut wf = w.clone();
    let mut b = Vec::with_capacity(c_out);
    for (o, row) in wf.data_mut().chunks_mut(c_in).enumerate() {
        let mut acc = b0.data()[o] as f64;
        for (i, v) in row.iter_mut().enumerate() {
            acc += *v as f64 * shift[i] as f64;
            *v *= scale[i];
        }
        b.push(acc as f32);
    }
    Ok((wf, Tensor::new(vec![c_out], b)?))
}

/// Replaces every norm group's statistics and affine terms with random
/// non-trivial values, so folding and parity checks exercise real arithmetic.
pub fn perturb_norm_statistics(store: &mut WeightStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in store.iter_mut() {
        let Some(field) = name.rsplit('.').next() else { continue };
        let range = match field {
            "gamma" => 0.5..1.5,
            "beta" | "mean" => -0.5..0.5,
            "var" => 0.5..2.0,
            _ => continue,
        };
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(range.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: Vec<(&str, Tensor)>) -> WeightStore {
        entries.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    }

    fn bn(prefix: &str, c: usize, g: f32, b: f32, m: f32, v: f32) -> Vec<(String, Tensor)> {
        [("gamma", g), ("beta", b), ("mean", m), ("var", v)]
            .into_iter()
            .map(|(f, x)| (format!("{prefix}.{f}"), Tensor::full(vec![c], x)))
            .collect()
    }

    #[test]
    fn identity_norm_leaves_weights() {
        let w = Tensor::from_fn(vec![2, 3, 1, 1], |i| i as f32);
        let mut s = store(vec![("c.w", w.clone())]);
        for (n, t) in bn("c.bn", 2, 1.0, 0.0, 0.0, 1.0) {
            s.insert(n, t).unwrap();
        }
        let f = fold_batchnorm_eps(&s, 0.0).unwrap();
        assert_eq!(f.names().collect::<Vec<_>>(), ["c.w", "c.b"]);
        assert_eq!(f.get("c.w").unwrap(), &w);
        assert!(f.get("c.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gamma_gives_zero_row_and_beta() {
        let mut s = store(vec![("c.w", Tensor::full(vec![2, 1, 3, 3], 0.3))]);
        let mut g = bn("c.bn", 2, 1.0, 0.7, 0.2, 1.0);
        g[0].1 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        for (n, t) in g {
            s.insert(n, t).unwrap();
        }
        let f = fold_batchnorm_eps(&s, 0.0).unwrap();
        let w = f.get("c.w").unwrap();
        assert!(w.data()[..9].iter().all(|&v| v == 0.0));
        assert!(w.data()[9..].iter().all(|&v| v == 0.3));
        assert_eq!(f.get("c.b").unwrap().data()[0], 0.7);
    }

    #[test]
    fn missing_statistics_is_data_error() {
        let mut s = store(vec![("c.w", Tensor::zeros(vec![1, 1, 1, 1]))]);
        s.insert("c.bn.gamma", Tensor::full(vec![1], 1.0)).unwrap();
        s.insert("c.bn.beta", Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(fold_batchnorm(&s), Err(Error::Data(_))));
    }

    #[test]
    fn prenorm_folds_into_following_projection() {
        // scale 2, shift -1 on both inputs; w = [[1, 3]], b = 0.5
        let mut s = store(vec![
            ("a.pw.w", Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap()),
            ("a.pw.b", Tensor::full(vec![1], 0.5)),
        ]);
        for (n, t) in bn("a.pw.prenorm", 2, 2.0, -1.0, 0.0, 1.0) {
            s.insert(n, t).unwrap();
        }
        let f = fold_batchnorm_eps(&s, 0.0).unwrap();
        assert_eq!(f.get("a.pw.w").unwrap().data(), &[2.0, 6.0]);
        assert_eq!(f.get("a.pw.b").unwrap().data(), &[0.5 - 4.0]);
        assert_eq!(f.len(), 2);
    }
}
