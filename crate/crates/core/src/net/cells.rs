//! Value-level recurrent cell API.
//!
//! LSTM gates: i, f, o = sigmoid(Wx*x + b + Wh*h), g = tanh(likewise),
//! c' = f.c + i.g, h' = o.tanh(c'). GRU uses update/reset/candidate gating
//! with the reset gate applied to the hidden conv output. All convs are
//! 3x3 pad 1; the cell is non-peephole.

use super::{register_cell_params, CellParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor};

/// Recurrent state carried across stages; `c` is unused for GRU. State at
/// t = 0 is all zeros and matches the input's spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(n: usize, channels: usize, h: usize, w: usize) -> Self {
        let shape = Shape::new(n, channels, h, w);
        RecurrentState {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }
}

fn cell_value_step<T: Scalar>(
    params: &CellParams<T>,
    state: &RecurrentState<T>,
    x: &Tensor<T>,
) -> Result<RecurrentState<T>> {
    if state.h.shape() != x.shape() {
        return Err(Error::shape(
            "recurrent cell state/input",
            state.h.shape(),
            x.shape(),
        ));
    }
    let mut tape = Tape::new();
    let cell_vars = register_cell_params(&mut tape, params, false);
    let hv = tape.leaf(state.h.clone(), false);
    let cv = tape.leaf(state.c.clone(), false);
    let xv = tape.leaf(x.clone(), false);
    let next = super::cell_step(
        &mut tape,
        &cell_vars,
        super::StateVars { h: hv, c: cv },
        xv,
    )?;
    Ok(RecurrentState {
        h: tape.value(next.h).clone(),
        c: tape.value(next.c).clone(),
    })
}

/// One convolutional LSTM step.
pub fn lstm_cell<T: Scalar>(
    params: &CellParams<T>,
    state: &RecurrentState<T>,
    x: &Tensor<T>,
) -> Result<RecurrentState<T>> {
    if !matches!(params, CellParams::Lstm { .. }) {
        return Err(Error::Contract("lstm_cell called with GRU parameters".into()));
    }
    cell_value_step(params, state, x)
}

/// One convolutional GRU step.
pub fn gru_cell<T: Scalar>(
    params: &CellParams<T>,
    state: &RecurrentState<T>,
    x: &Tensor<T>,
) -> Result<RecurrentState<T>> {
    if !matches!(params, CellParams::Gru { .. }) {
        return Err(Error::Contract("gru_cell called with LSTM parameters".into()));
    }
    cell_value_step(params, state, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build, CellKind, GateParams, NetworkConfig};
    use crate::tensor::kernels_test_support::conv3x3_naive;
    use rand::{Rng, SeedableRng};

    fn small_cfg(cell: CellKind) -> NetworkConfig {
        NetworkConfig {
            recurrent_cell: cell,
            channels: 3,
            resblock_count: 1,
            stages_t: 2,
            ..NetworkConfig::default()
        }
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_identical_steps_diverge_because_cell_state_accumulates() {
        let params = build::<f64>(&small_cfg(CellKind::Lstm), 5).unwrap();
        let cell = params.cell.as_ref().unwrap();
        let x = rand_tensor(Shape::new(1, 3, 4, 4), 6);
        let s0 = RecurrentState::zeros(1, 3, 4, 4);
        let s1 = lstm_cell(cell, &s0, &x).unwrap();
        let s2 = lstm_cell(cell, &s1, &x).unwrap();
        assert!(!s1.h.bit_eq(&s2.h));
        assert!(!s1.c.bit_eq(&s2.c));
    }

    /// Hand-unrolled two-step oracle: recompute both steps from the gate
    /// equations using only the naive convolution and plain elementwise math.
    #[test]
    fn lstm_matches_hand_unrolled_gate_equations() {
        let params = build::<f64>(&small_cfg(CellKind::Lstm), 7).unwrap();
        let cell = params.cell.as_ref().unwrap();
        let CellParams::Lstm { i, f, g, o } = cell else {
            unreachable!()
        };
        let x = rand_tensor(Shape::new(1, 3, 4, 4), 8);
        let s0 = RecurrentState::zeros(1, 3, 4, 4);
        let s1 = lstm_cell(cell, &s0, &x).unwrap();
        let s2 = lstm_cell(cell, &s1, &x).unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let step = |h: &Tensor<f64>, c: &Tensor<f64>| {
            let gate = |gp: &GateParams<f64>, act: &dyn Fn(f64) -> f64| {
                let xa = conv3x3_naive(&x, &gp.x.weight, gp.x.bias.as_ref());
                let ha = conv3x3_naive(h, &gp.h.weight, None);
                let data = xa
                    .data()
                    .iter()
                    .zip(ha.data())
                    .map(|(a, b)| act(a + b))
                    .collect();
                Tensor::from_vec(x.shape(), data).unwrap()
            };
            let iv = gate(i, &sigmoid);
            let fv = gate(f, &sigmoid);
            let gv = gate(g, &|v| v.tanh());
            let ov = gate(o, &sigmoid);
            let c_new: Vec<f64> = fv
                .data()
                .iter()
                .zip(c.data())
                .zip(iv.data().iter().zip(gv.data()))
                .map(|((f, c), (i, g))| f * c + i * g)
                .collect();
            let h_new: Vec<f64> = ov
                .data()
                .iter()
                .zip(&c_new)
                .map(|(o, c)| o * c.tanh())
                .collect();
            (
                Tensor::from_vec(x.shape(), h_new).unwrap(),
                Tensor::from_vec(x.shape(), c_new).unwrap(),
            )
        };
        let (h1, c1) = step(&s0.h, &s0.c);
        let (h2, c2) = step(&h1, &c1);
        for (a, b) in [(&s1.h, &h1), (&s1.c, &c1), (&s2.h, &h2), (&s2.c, &c2)] {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gru_zero_everything_stays_zero() {
        let params =
            crate::net::ParameterSet::<f64>::zeros(&small_cfg(CellKind::Gru)).unwrap();
        let cell = params.cell.as_ref().unwrap();
        let s0 = RecurrentState::zeros(1, 3, 4, 4);
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let s1 = gru_cell(cell, &s0, &x).unwrap();
        assert!(s1.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_mismatch_is_shape_error() {
        let params = build::<f64>(&small_cfg(CellKind::Lstm), 0).unwrap();
        let cell = params.cell.as_ref().unwrap();
        let state = RecurrentState::zeros(1, 3, 4, 4);
        let x = Tensor::zeros(Shape::new(1, 3, 5, 4));
        assert!(matches!(
            lstm_cell(cell, &state, &x),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn wrong_cell_kind_is_contract_error() {
        let params = build::<f64>(&small_cfg(CellKind::Gru), 0).unwrap();
        let cell = params.cell.as_ref().unwrap();
        let state = RecurrentState::zeros(1, 3, 4, 4);
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        assert!(matches!(
            lstm_cell(cell, &state, &x),
            Err(Error::Contract(_))
        ));
    }
}
