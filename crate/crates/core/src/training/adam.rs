use serde::{Deserialize, Serialize};

use crate::error::{LeafError, Result};
use crate::layers::NamedParam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[NamedParam]) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before any parameter changes.
pub fn adam_step(
    params: &mut [NamedParam],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(LeafError::shape(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if g.len() != p.tensor.len() || m.len() != p.tensor.len() {
            return Err(LeafError::shape(format!(
                "{}: {} values, gradient {}, moments {}",
                p.name,
                p.tensor.len(),
                g.len(),
                m.len()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(LeafError::Numeric(format!("non-finite gradient {bad} in {}", p.name)));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let m_new = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
            let v_new = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.epsilon);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn param(values: &[f32]) -> NamedParam {
        NamedParam { name: "w".into(), tensor: Tensor::from_vec(&[values.len()], values.to_vec()).unwrap() }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![param(&[0.5, -2.0])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![1.0, -3.0]], &mut s, 1e-3, &AdamConfig::default()).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g)
        let want = [0.5 - 1e-3 / (1.0 + 1e-8), -2.0 + 3e-3 / (3.0 + 1e-8)];
        for (got, want) in p[0].tensor.data().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-7, "{got} vs {want}");
        }
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![param(&[0.25, 1.5, -3.0])];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..50 {
            adam_step(&mut p, &[vec![0.0; 3]], &mut s, 1e-2, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut p = vec![param(&[1.0, 1.0]), param(&[1.0])];
        let mut s = AdamState::new(&p);
        for g in [0.3, -0.1, 0.7] {
            adam_step(&mut p, &[vec![g, g], vec![g]], &mut s, 1e-2, &AdamConfig::default()).unwrap();
        }
        let d = p[0].tensor.data();
        assert_eq!(d[0], d[1]);
        assert_eq!(d[0], p[1].tensor.data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = vec![param(&[1.0]), NamedParam { name: "layer3.bias".into(), ..param(&[2.0]) }];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[vec![0.5], vec![f32::NAN]], &mut s, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(matches!(&err, LeafError::Numeric(m) if m.contains("layer3.bias")), "{err}");
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }
}
