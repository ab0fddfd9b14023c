//! Folding inference batch norm into the adjacent linear operator.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{BnParams, ConvBn, ConvParams, LinearParams};
use crate::tensor::Tensor;

fn scale_shift_f64(bn: &BnParams) -> Result<(Vec<f64>, Vec<f64>)> {
    bn.validate()?;
    let eps = bn.eps as f64;
    let scale: Vec<f64> = bn
        .gamma
        .data()
        .iter()
        .zip(bn.running_var.data())
        .map(|(&g, &v)| g as f64 / (v as f64 + eps).sqrt())
        .collect();
    let shift = bn
        .beta
        .data()
        .iter()
        .zip(bn.running_mean.data())
        .zip(&scale)
        .map(|((&b, &m), &s)| b as f64 - m as f64 * s)
        .collect();
    Ok((scale, shift))
}

/// Conv followed by BN → a single conv with bias.
pub fn fold_bn_into_conv(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams> {
    conv.validate()?;
    let cout = conv.out_channels();
    if bn.channels() != cout {
        return Err(Error::shape(format!(
            "batch norm over {} channels cannot follow a conv with {cout} outputs",
            bn.channels()
        )));
    }
    let (scale, shift) = scale_shift_f64(bn)?;
    let per_out = conv.weight.numel() / cout;
    let mut weight = conv.weight.clone();
    for (o, row) in weight.data_mut().chunks_mut(per_out).enumerate() {
        row.iter_mut().for_each(|v| *v = (*v as f64 * scale[o]) as f32);
    }
    let bias = (0..cout)
        .map(|o| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
            (b * scale[o] + shift[o]) as f32
        })
        .collect();
    ConvParams::new(weight, Some(Tensor::new(&[cout], bias)?), conv.stride, conv.padding, conv.groups)
}

/// BN followed by a linear layer → a single linear layer.
pub fn fold_bn_into_linear(bn: &BnParams, fc: &LinearParams) -> Result<LinearParams> {
    let [cout, cin] = match fc.weight.shape() {
        &[o, i] => [o, i],
        s => return Err(Error::shape(format!("linear weight must be rank 2, got {s:?}"))),
    };
    if bn.channels() != cin {
        return Err(Error::shape(format!(
            "batch norm over {} channels cannot feed a linear layer with {cin} inputs",
            bn.channels()
        )));
    }
    let (scale, shift) = scale_shift_f64(bn)?;
    let mut weight = fc.weight.clone();
    let mut bias = Vec::with_capacity(cout);
    for (o, row) in weight.data_mut().chunks_mut(cin).enumerate() {
        let mut b = fc.bias.data()[o] as f64;
        for (i, v) in row.iter_mut().enumerate() {
            b += *v as f64 * shift[i];
            *v = (*v as f64 * scale[i]) as f32;
        }
        bias.push(b as f32);
    }
    Ok(LinearParams {
        weight,
        bias: Tensor::new(&[cout], bias)?,
    })
}

pub fn fuse_conv_bn(l: &ConvBn) -> Result<ConvBn> {
    Ok(match &l.bn {
        Some(bn) => ConvBn {
            conv: fold_bn_into_conv(&l.conv, bn)?,
            bn: None,
            act: l.act,
        },
        None => l.clone(),
    })
}

/// Collapses every Conv+BN and BN+Linear pair. Idempotent.
pub fn fuse_model(m: &Model) -> Result<Model> {
    let mut fused = m.clone();
    for l in fused.conv_bns_mut() {
        *l = fuse_conv_bn(l)?;
    }
    if let Some(bn) = fused.head.bn.take() {
        fused.head.fc = fold_bn_into_linear(&bn, &fused.head.fc)?;
    }
    Ok(fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::count::count_params;
    use crate::model::{preset_config, InitPolicy, ModelConfig};
    use crate::nn::{batchnorm_infer, conv2d, linear, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
    }

    fn rand_bn(rng: &mut ChaCha8Rng, c: usize) -> BnParams {
        BnParams {
            gamma: rand_t(rng, &[c], 0.5, 2.0),
            beta: rand_t(rng, &[c], -1.0, 1.0),
            running_mean: rand_t(rng, &[c], -1.0, 1.0),
            running_var: rand_t(rng, &[c], 0.1, 2.0),
            eps: 1e-5,
        }
    }

    #[test]
    fn identity_bn_keeps_weights() {
        let w = Tensor::from_fn(&[2, 3, 3, 3], |i| i as f32 * 0.1).unwrap();
        let conv = ConvParams::new(w.clone(), None, 1, 1, 1).unwrap();
        let mut bn = BnParams::identity(2).unwrap();
        bn.eps = 0.0;
        let f = fold_bn_into_conv(&conv, &bn).unwrap();
        assert_eq!(f.weight, w);
        assert_eq!(f.bias.unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gamma_two_doubles() {
        let w = Tensor::from_fn(&[1, 1, 1, 1], |_| 0.75).unwrap();
        let conv = ConvParams::new(w, Some(Tensor::new(&[1], vec![0.5]).unwrap()), 1, 0, 1).unwrap();
        let mut bn = BnParams::identity(1).unwrap();
        bn.eps = 0.0;
        bn.gamma = Tensor::new(&[1], vec![2.0]).unwrap();
        let f = fold_bn_into_conv(&conv, &bn).unwrap();
        assert_eq!(f.weight.data(), &[1.5]);
        assert_eq!(f.bias.unwrap().data(), &[1.0]);
    }

    #[test]
    fn folded_conv_matches_conv_then_bn() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for groups in [1, 2, 4] {
            let conv = ConvParams::new(rand_t(&mut rng, &[4, 4 / groups, 3, 3], -1.0, 1.0), None, 1, 1, groups).unwrap();
            let bn = rand_bn(&mut rng, 4);
            let x = rand_t(&mut rng, &[1, 4, 8, 8], -1.0, 1.0);
            let want = batchnorm_infer(&conv2d(&x, &conv).unwrap(), &bn).unwrap();
            let got = conv2d(&x, &fold_bn_into_conv(&conv, &bn).unwrap()).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-4);
        }
    }

    #[test]
    fn folded_linear_matches_bn_then_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let fc = LinearParams {
            weight: rand_t(&mut rng, &[5, 6], -1.0, 1.0),
            bias: rand_t(&mut rng, &[5], -1.0, 1.0),
        };
        let bn = rand_bn(&mut rng, 6);
        let x = rand_t(&mut rng, &[3, 6], -2.0, 2.0);
        let want = linear(&batchnorm_infer(&x, &bn).unwrap(), &fc.weight, &fc.bias).unwrap();
        let f = fold_bn_into_linear(&bn, &fc).unwrap();
        assert!(linear(&x, &f.weight, &f.bias).unwrap().max_abs_diff(&want) <= 1e-5);
    }

    #[test]
    fn extent_mismatch() {
        let conv = ConvParams::new(Tensor::ones(&[3, 1, 1, 1]).unwrap(), None, 1, 0, 1).unwrap();
        assert!(matches!(fold_bn_into_conv(&conv, &BnParams::identity(2).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn fused_model_has_no_bn_and_is_idempotent() {
        let cfg: ModelConfig = preset_config("iformer-t").unwrap();
        let m = Model::new(&cfg, &InitPolicy { random_bn: true, ..InitPolicy::default() }).unwrap();
        let f = fuse_model(&m).unwrap();
        assert_eq!(f.bn_count(), 0);
        assert!(f.to_store().iter().all(|(n, _)| !n.contains(".bn.")));
        assert_eq!(fuse_model(&f).unwrap(), f);
        assert!(count_params(&f) < count_params(&m));
        let ConvBn { act, .. } = &f.stem[0];
        assert_eq!(*act, Activation::Gelu);
    }
}
