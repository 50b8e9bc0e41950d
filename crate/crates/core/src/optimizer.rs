//! Adam with decoupled weight decay, and the EMA teacher update.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::io::{eof_aware, read_magic};
use crate::network::{read_shape, write_shape, AttentionMILParams};

pub const ADAM_MAGIC: &[u8; 8] = b"PLLADM01";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: AttentionMILParams,
    pub v: AttentionMILParams,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &AttentionMILParams, lr: f64, weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·( m̂ / (√v̂ + ε) + weight_decay·θ )
/// ```
///
/// Nothing is modified if any gradient entry is non-finite.
pub fn adam_step(
    params: &mut AttentionMILParams,
    grads: &AttentionMILParams,
    state: &mut AdamState,
) -> Result<()> {
    if state.lr.is_nan() || state.lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            state.lr
        )));
    }
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::ShapeMismatch(
            "parameters, gradients and Adam moments differ".into(),
        ));
    }
    if let Some((name, _)) = grads
        .tensors()
        .find(|(_, t)| t.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }

    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let correct1 = 1.0 - b1.powf(t);
    let correct2 = 1.0 - b2.powf(t);
    let (lr, eps, wd) = (state.lr, state.eps, state.weight_decay);

    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((theta, (_, g)), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(moments)
    {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
    }
    Ok(())
}

/// `teacher ← alpha·teacher + (1 − alpha)·student`, elementwise.
pub fn ema_update(
    teacher: &mut AttentionMILParams,
    student: &AttentionMILParams,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidFraction(alpha, "[0, 1]"));
    }
    if !teacher.same_shape(student) {
        return Err(Error::ShapeMismatch(
            "teacher and student shapes differ".into(),
        ));
    }
    for (t, (_, s)) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        t.iter_mut()
            .zip(s)
            .for_each(|(t, s)| *t = alpha * *t + (1.0 - alpha) * s);
    }
    Ok(())
}

/// Magic `PLLADM01`, the model shape header, u64 step, f64 hyperparameters,
/// then both moment sets as f64 in tensor declaration order.
pub fn write_adam_state(w: &mut impl Write, state: &AdamState) -> Result<()> {
    w.write_all(ADAM_MAGIC)?;
    write_shape(w, state.m.shape())?;
    w.write_u64::<LittleEndian>(state.step)?;
    for v in [
        state.lr,
        state.beta1,
        state.beta2,
        state.eps,
        state.weight_decay,
    ] {
        w.write_f64::<LittleEndian>(v)?;
    }
    for moments in [&state.m, &state.v] {
        for (_, t) in moments.tensors() {
            for v in t {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
    }
    Ok(())
}

pub fn read_adam_state(r: &mut impl Read) -> Result<AdamState> {
    read_magic(r, ADAM_MAGIC)?;
    let shape = read_shape(r)?;
    let step = r.read_u64::<LittleEndian>().map_err(eof_aware)?;
    let mut h = [0.0; 5];
    for v in &mut h {
        *v = r.read_f64::<LittleEndian>().map_err(eof_aware)?;
    }
    let mut m = AttentionMILParams::zeros(shape);
    let mut v = AttentionMILParams::zeros(shape);
    for moments in [&mut m, &mut v] {
        for t in moments.tensors_mut() {
            r.read_f64_into::<LittleEndian>(t).map_err(eof_aware)?;
        }
    }
    Ok(AdamState {
        m,
        v,
        step,
        lr: h[0],
        beta1: h[1],
        beta2: h[2],
        eps: h[3],
        weight_decay: h[4],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, ModelShape};

    fn scalar_shape() -> ModelShape {
        // L=0, D=1, C=1: classifier weight is the first scalar parameter.
        ModelShape {
            layers: 0,
            hidden: 0,
            classes: 1,
            embed_dim: 1,
        }
    }

    fn first(p: &AttentionMILParams) -> f64 {
        p.classifier.weight[[0, 0]]
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = init_params(3, 2, 1, 4, 0).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.001, 0.0);
        for _ in 0..3 {
            adam_step(&mut p, &before.zeros_like(), &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = AttentionMILParams::zeros(scalar_shape());
        let mut g = p.zeros_like();
        g.classifier.weight[[0, 0]] = 1.0;
        let mut st = AdamState::new(&p, 0.001, 0.0);
        adam_step(&mut p, &g, &mut st).unwrap();
        // m̂ = 1, v̂ = 1 at t = 1
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((first(&p) - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = AttentionMILParams::zeros(scalar_shape());
        p.classifier.weight[[0, 0]] = 1.0;
        let g = p.zeros_like();
        let mut st = AdamState::new(&p, 0.001, 1e-5);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert!((first(&p) - (1.0 - 1e-8)).abs() < 1e-16);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = init_params(2, 1, 1, 2, 0).unwrap();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.attention.bias[0] = f64::NAN;
        let mut st = AdamState::new(&p, 0.001, 0.0);
        let err = adam_step(&mut p, &g, &mut st).unwrap_err();
        assert!(err.to_string().contains("attention.bias"), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn ema_boundaries_and_value() {
        let student = init_params(3, 2, 1, 3, 1).unwrap();
        let teacher0 = init_params(3, 2, 1, 3, 2).unwrap();

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t, student);

        let mut t = teacher0.clone();
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t, teacher0);

        let mut t = AttentionMILParams::zeros(scalar_shape());
        t.classifier.weight[[0, 0]] = 2.0;
        ema_update(&mut t, &AttentionMILParams::zeros(scalar_shape()), 0.999).unwrap();
        assert!((first(&t) - 1.998).abs() < 1e-12);

        let other = init_params(3, 2, 2, 3, 1).unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
        assert!(ema_update(&mut t.clone(), &t, 1.5).is_err());
    }

    #[test]
    fn adam_state_round_trip() {
        let mut p = init_params(3, 2, 1, 4, 5).unwrap();
        let g = init_params(3, 2, 1, 4, 6).unwrap();
        let mut st = AdamState::new(&p, 0.005, 1e-5);
        adam_step(&mut p, &g, &mut st).unwrap();
        let mut buf = Vec::new();
        write_adam_state(&mut buf, &st).unwrap();
        assert_eq!(read_adam_state(&mut &buf[..]).unwrap(), st);
    }
}
