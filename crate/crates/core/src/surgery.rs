//! Projection of an auxiliary gradient away from the main objective's
//! gradient when the two conflict.

use crate::error::{Error, Result};
use crate::nn::GradientSet;
use crate::tensor::Tensor;

/// `g_aux - min(0, <g_aux, g_main>) / |g_main|^2 * g_main`, on the globally
/// flattened vectors. A zero main gradient leaves `g_aux` untouched.
pub fn adjusted_aux(g_main: &GradientSet, g_aux: &GradientSet) -> Result<GradientSet> {
    check_layout(g_main, g_aux)?;
    let norm_sq = g_main.norm_sq();
    if norm_sq == 0.0 {
        return Ok(g_aux.clone());
    }
    let d = g_aux.dot(g_main);
    if d >= 0.0 {
        return Ok(g_aux.clone());
    }
    Ok(g_aux.axpy(-d / norm_sq, g_main))
}

/// Main gradient plus the non-conflicting part of the auxiliary gradient.
pub fn pagrad_combine(g_main: &GradientSet, g_aux: &GradientSet) -> Result<GradientSet> {
    let aux = adjusted_aux(g_main, g_aux)?;
    Ok(g_main.axpy(1.0, &aux))
}

/// Same projection applied tensor by tensor instead of on the whole vector.
pub fn pagrad_combine_per_layer(g_main: &GradientSet, g_aux: &GradientSet) -> Result<GradientSet> {
    check_layout(g_main, g_aux)?;
    let tensors = g_main
        .tensors()
        .iter()
        .zip(g_aux.tensors())
        .map(|(m, a)| {
            let (m, a) = (m.data(), a.data());
            let norm_sq: f64 = m.iter().map(|x| x * x).sum();
            let d: f64 = m.iter().zip(a).map(|(x, y)| x * y).sum();
            let coef = if norm_sq > 0.0 && d < 0.0 { d / norm_sq } else { 0.0 };
            m.iter().zip(a).map(|(x, y)| x + y - coef * x).collect::<Vec<_>>()
        })
        .zip(g_main.tensors())
        .map(|(data, t)| Tensor::from_parts(t.shape().to_vec(), data).expect("same layout"))
        .collect();
    GradientSet::new(g_main.names().to_vec(), tensors)
}

fn check_layout(a: &GradientSet, b: &GradientSet) -> Result<()> {
    if a.same_layout(b) {
        Ok(())
    } else {
        Err(Error::Shape("gradient sets have different layouts".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> GradientSet {
        GradientSet::from_vector(x.to_vec())
    }

    #[test]
    fn conflicting_component_removed() {
        let aux = adjusted_aux(&v(&[1.0, 0.0]), &v(&[-1.0, 1.0])).unwrap();
        assert_eq!(aux.flatten(), vec![0.0, 1.0]);
        assert_eq!(aux.dot(&v(&[1.0, 0.0])), 0.0);
        assert_eq!(pagrad_combine(&v(&[1.0, 0.0]), &v(&[-1.0, 1.0])).unwrap().flatten(), vec![1.0, 1.0]);
    }

    #[test]
    fn aligned_inputs_pass_through() {
        let out = pagrad_combine(&v(&[1.0, 2.0]), &v(&[0.5, -0.1])).unwrap();
        assert_eq!(out.flatten(), vec![1.5, 1.9]);
    }

    #[test]
    fn opposite_aux_is_erased() {
        let m = v(&[0.3, -1.2, 2.0]);
        let out = pagrad_combine(&m, &m.scaled(-1.0)).unwrap();
        for (a, b) in out.flatten().iter().zip(m.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_main_gives_plain_sum() {
        let out = pagrad_combine(&v(&[0.0, 0.0]), &v(&[-1.0, 3.0])).unwrap();
        assert_eq!(out.flatten(), vec![-1.0, 3.0]);
    }

    #[test]
    fn layout_mismatch_rejected() {
        assert!(matches!(pagrad_combine(&v(&[1.0]), &v(&[1.0, 2.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn per_layer_differs_from_global() {
        let names = vec!["a".to_string(), "b".to_string()];
        let m = GradientSet::new(names.clone(), vec![Tensor::vector(vec![1.0]), Tensor::vector(vec![1.0])]).unwrap();
        let a = GradientSet::new(names, vec![Tensor::vector(vec![-1.0]), Tensor::vector(vec![2.0])]).unwrap();
        // globally aligned (dot = 1), but the first tensor conflicts
        assert_eq!(pagrad_combine(&m, &a).unwrap().flatten(), vec![0.0, 3.0]);
        assert_eq!(pagrad_combine_per_layer(&m, &a).unwrap().flatten(), vec![1.0, 3.0]);
    }

    proptest! {
        #[test]
        fn never_opposes_main(
            m in prop::collection::vec(-5.0f64..5.0, 1..12),
            seed in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let a: Vec<f64> = seed[..m.len()].to_vec();
            let (gm, ga) = (v(&m), v(&a));
            let out = pagrad_combine(&gm, &ga).unwrap();
            let part = out.axpy(-1.0, &gm);
            prop_assert!(part.dot(&gm) >= -1e-12);
            if ga.dot(&gm) >= 0.0 {
                prop_assert_eq!(out.flatten(), gm.axpy(1.0, &ga).flatten());
            }
        }

        #[test]
        fn projection_is_scale_equivariant(
            m in prop::collection::vec(-5.0f64..5.0, 4),
            a in prop::collection::vec(-5.0f64..5.0, 4),
            c in 0.01f64..100.0,
        ) {
            let (gm, ga) = (v(&m), v(&a));
            prop_assume!(gm.norm_sq() > 1e-6);
            let x = adjusted_aux(&gm, &ga).unwrap().flatten();
            let y = adjusted_aux(&gm.scaled(c), &ga).unwrap().flatten();
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() <= 1e-9 * (1.0 + p.abs()));
            }
        }
    }
}
