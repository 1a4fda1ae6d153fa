//! Categorical divergences on logits.

use super::kernels::log_softmax_rows;

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_rows(logits, logits.len())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// `KL[softmax(p) || softmax(q)]`.
pub fn kl_categorical(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    assert_eq!(p_logits.len(), q_logits.len(), "kl: length mismatch");
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// Jensen-Shannon divergence (natural log), in `[0, ln 2]`.
pub fn js_distance(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    assert_eq!(p_logits.len(), q_logits.len(), "js: length mismatch");
    let p = softmax(p_logits);
    let q = softmax(q_logits);
    let mut js = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        if *pi > 0.0 {
            js += 0.5 * pi * (pi / m).ln();
        }
        if *qi > 0.0 {
            js += 0.5 * qi * (qi / m).ln();
        }
    }
    js.clamp(0.0, std::f64::consts::LN_2)
}
