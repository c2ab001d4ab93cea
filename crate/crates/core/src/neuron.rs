//! Discrete-time LIF / IF neurons with subtract reset.
//!
//! Per timestep `n`:
//!
//! ```text
//! U[n] = β·V[n-1] + (1-β)·I[n]      (LIF)
//! U[n] = V[n-1] + I[n]              (IF)
//! S[n] = H(U[n] - V_th),  H(0) = 1
//! V[n] = U[n] - V_th·S[n]
//! ```
//!
//! with `V[0] = 0`. The forward pass always emits exact binary spikes; the
//! arctangent surrogate only shapes gradients.

use std::f64::consts::PI;

use spikelab_numcore::{CustomOp, Graph, Tensor, Var};

use crate::error::{param_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeuronKind {
    Lif,
    If,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuronParams {
    beta: f64,
    v_th: f64,
    kind: NeuronKind,
    surrogate_alpha: f64,
}

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_SURROGATE_ALPHA: f64 = 2.0;

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            beta: DEFAULT_BETA,
            v_th: 1.0,
            kind: NeuronKind::Lif,
            surrogate_alpha: DEFAULT_SURROGATE_ALPHA,
        }
    }
}

impl NeuronParams {
    pub fn lif(beta: f64, v_th: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return param_err(format!("LIF decay beta must lie in [0, 1), got {beta}"));
        }
        Self::check_threshold(v_th)?;
        Ok(NeuronParams {
            beta,
            v_th,
            kind: NeuronKind::Lif,
            surrogate_alpha: DEFAULT_SURROGATE_ALPHA,
        })
    }

    pub fn integrate_and_fire(v_th: f64) -> Result<Self> {
        Self::check_threshold(v_th)?;
        Ok(NeuronParams {
            beta: 1.0,
            v_th,
            kind: NeuronKind::If,
            surrogate_alpha: DEFAULT_SURROGATE_ALPHA,
        })
    }

    pub fn with_surrogate_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return param_err(format!("surrogate width must be positive, got {alpha}"));
        }
        self.surrogate_alpha = alpha;
        Ok(self)
    }

    fn check_threshold(v_th: f64) -> Result<()> {
        if v_th > 0.0 && v_th.is_finite() {
            Ok(())
        } else {
            param_err(format!("threshold must be positive, got {v_th}"))
        }
    }

    /// Decay factor; 1 for IF neurons.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn v_th(&self) -> f64 {
        self.v_th
    }

    pub fn kind(&self) -> NeuronKind {
        self.kind
    }

    pub fn surrogate_alpha(&self) -> f64 {
        self.surrogate_alpha
    }

    /// Coefficient on the input current in the charge equation.
    pub fn input_gain(&self) -> f64 {
        match self.kind {
            NeuronKind::Lif => 1.0 - self.beta,
            NeuronKind::If => 1.0,
        }
    }

    #[inline]
    pub(crate) fn charge_scalar(&self, v_prev: f64, i_n: f64) -> f64 {
        match self.kind {
            NeuronKind::Lif => self.beta * v_prev + (1.0 - self.beta) * i_n,
            NeuronKind::If => v_prev + i_n,
        }
    }

    /// Smooth spike function `σ(u) = atan(π·α·(u - V_th)/2)/π + 1/2`.
    pub fn surrogate(&self, u: f64) -> f64 {
        (PI * self.surrogate_alpha * (u - self.v_th) / 2.0).atan() / PI + 0.5
    }

    /// `dσ/du = α / (2·(1 + (π·α·(u - V_th)/2)²))`.
    pub fn surrogate_derivative(&self, u: f64) -> f64 {
        let z = PI * self.surrogate_alpha * (u - self.v_th) / 2.0;
        self.surrogate_alpha / (2.0 * (1.0 + z * z))
    }
}

/// Membrane potential after integrating one input step.
pub fn charge(params: &NeuronParams, v_prev: &Tensor, i_n: &Tensor) -> Result<Tensor> {
    Ok(v_prev.zip_map(i_n, "charge", |v, i| params.charge_scalar(v, i))?)
}

/// Threshold and subtract-reset: returns `(S[n], V[n])`.
pub fn fire_reset(params: &NeuronParams, u_n: &Tensor) -> (Tensor, Tensor) {
    let spikes = u_n.map(|u| if u >= params.v_th { 1.0 } else { 0.0 });
    let v = u_n.map(|u| if u >= params.v_th { u - params.v_th } else { u });
    (spikes, v)
}

/// Runs the neuron over the leading (time) axis of `currents`, starting from
/// `V = 0`. Returns the spike train and the post-reset membrane trace.
pub fn run_sequence(params: &NeuronParams, currents: &Tensor) -> Result<(Tensor, Tensor)> {
    let (steps, width) = time_layout(currents)?;
    let x = currents.data();
    let mut spikes = vec![0.0; x.len()];
    let mut trace = vec![0.0; x.len()];
    let mut v = vec![0.0; width];
    for t in 0..steps {
        let off = t * width;
        for j in 0..width {
            let u = params.charge_scalar(v[j], x[off + j]);
            let fired = u >= params.v_th;
            spikes[off + j] = if fired { 1.0 } else { 0.0 };
            v[j] = if fired { u - params.v_th } else { u };
            trace[off + j] = v[j];
        }
    }
    Ok((
        Tensor::new(currents.shape(), spikes)?,
        Tensor::new(currents.shape(), trace)?,
    ))
}

fn time_layout(t: &Tensor) -> Result<(usize, usize)> {
    let steps = t.shape().first().copied().unwrap_or(0);
    if steps == 0 {
        return param_err("neuron input needs at least one timestep");
    }
    Ok((steps, t.len() / steps))
}

/// Elementwise surrogate derivative `∂S/∂U`.
pub fn surrogate_grad(u: &Tensor, params: &NeuronParams) -> Tensor {
    u.map(|x| params.surrogate_derivative(x))
}

/// Mean spike value over all elements and timesteps. Rejects anything that is
/// not strictly binary.
pub fn firing_rate(spikes: &Tensor) -> Result<f64> {
    if let Some(bad) = spikes.data().iter().find(|&&s| s != 0.0 && s != 1.0) {
        return Err(Error::Domain(format!("firing rate of non-binary spike value {bad}")));
    }
    Ok(spikes.mean())
}

/// Spike nonlinearity used by the differentiable neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeFn {
    /// Exact Heaviside forward, surrogate backward.
    Heaviside,
    /// Surrogate in both directions; makes the network smooth for gradient checks.
    Smooth,
}

struct LifOp {
    params: NeuronParams,
    u_trace: Vec<f64>,
    steps: usize,
}

impl CustomOp for LifOp {
    fn name(&self) -> &'static str {
        "lif"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> spikelab_numcore::Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let p = &self.params;
        let width = inputs[0].len() / self.steps;
        let (decay, gain) = (p.beta(), p.input_gain());
        let go = grad_out.data();
        let mut gi = vec![0.0; go.len()];
        let mut gv = vec![0.0; width];
        for t in (0..self.steps).rev() {
            let off = t * width;
            for j in 0..width {
                let ds = p.surrogate_derivative(self.u_trace[off + j]);
                let gu = go[off + j] * ds + gv[j] * (1.0 - p.v_th() * ds);
                gi[off + j] = gain * gu;
                gv[j] = decay * gu;
            }
        }
        Ok(vec![Some(Tensor::new(inputs[0].shape(), gi)?)])
    }
}

/// Differentiable multi-step neuron over the leading time axis of `input`.
/// Gradients flow through the reset path and across timesteps (BPTT).
pub fn lif(graph: &mut Graph, input: Var, params: &NeuronParams, mode: SpikeFn) -> Result<Var> {
    let x = graph.value(input);
    let (steps, width) = time_layout(x)?;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut u_trace = vec![0.0; xd.len()];
    let mut v = vec![0.0; width];
    for t in 0..steps {
        let off = t * width;
        for j in 0..width {
            let u = params.charge_scalar(v[j], xd[off + j]);
            let s = match mode {
                SpikeFn::Heaviside => {
                    if u >= params.v_th() {
                        1.0
                    } else {
                        0.0
                    }
                }
                SpikeFn::Smooth => params.surrogate(u),
            };
            u_trace[off + j] = u;
            out[off + j] = s;
            v[j] = u - params.v_th() * s;
        }
    }
    let out = Tensor::new(x.shape(), out)?;
    let op = LifOp {
        params: *params,
        u_trace,
        steps,
    };
    Ok(graph.custom(&[input], out, Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(NeuronParams::lif(1.0, 1.0).is_err());
        assert!(NeuronParams::lif(-0.1, 1.0).is_err());
        assert!(NeuronParams::lif(0.5, 0.0).is_err());
        assert!(NeuronParams::integrate_and_fire(-1.0).is_err());
        assert!(NeuronParams::default().with_surrogate_alpha(0.0).is_err());
        assert_eq!(NeuronParams::default().beta(), 0.25);
    }

    #[test]
    fn charge_examples() {
        let x = t1(&[0.3, -2.0, 7.0]);
        let memoryless = NeuronParams::lif(0.0, 1.0).unwrap();
        assert_eq!(charge(&memoryless, &t1(&[5.0, 5.0, 5.0]), &x).unwrap(), x);
        let lif = NeuronParams::lif(0.25, 1.0).unwrap();
        assert_eq!(charge(&lif, &t1(&[1.0]), &t1(&[1.0])).unwrap().data(), &[1.0]);
        let ifn = NeuronParams::integrate_and_fire(1.0).unwrap();
        assert!((charge(&ifn, &t1(&[0.6]), &t1(&[0.6])).unwrap().data()[0] - 1.2).abs() < 1e-15);
        assert!(charge(&lif, &t1(&[1.0]), &t1(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn fire_reset_examples() {
        let p = NeuronParams::lif(0.25, 1.0).unwrap();
        let (s, v) = fire_reset(&p, &t1(&[0.5, 1.0, 1.5]));
        assert_eq!(s.data(), &[0.0, 1.0, 1.0]);
        assert_eq!(v.data(), &[0.5, 0.0, 0.5]);
        let u = t1(&[0.1, -0.3, 0.99]);
        let (s, v) = fire_reset(&p, &u);
        assert!(s.data().iter().all(|&x| x == 0.0));
        assert_eq!(v, u);
    }

    #[test]
    fn run_sequence_examples() {
        let lif = NeuronParams::lif(0.5, 0.5).unwrap();
        let (s, v) = run_sequence(&lif, &t1(&[1.0, 1.0])).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0]);
        assert_eq!(v.data(), &[0.0, 0.0]);

        let ifn = NeuronParams::integrate_and_fire(1.0).unwrap();
        let (s, v) = run_sequence(&ifn, &t1(&[0.6, 0.6, 0.6])).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0]);
        assert!((v.data()[2] - 0.8).abs() < 1e-12);

        let (s, v) = run_sequence(&lif, &Tensor::zeros(&[4, 3])).unwrap();
        assert_eq!(s.sum(), 0.0);
        assert_eq!(v.sum(), 0.0);

        assert!(run_sequence(&lif, &Tensor::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn surrogate_examples() {
        let p = NeuronParams::lif(0.25, 1.0).unwrap();
        assert_eq!(surrogate_grad(&t1(&[1.0]), &p).data(), &[1.0]);
        let p3 = p.with_surrogate_alpha(3.0).unwrap();
        assert_eq!(p3.surrogate_derivative(1.0), 1.5);
        assert!(p.surrogate_derivative(1e9) < 1e-15);
        assert!(p.surrogate_derivative(-1e9) < 1e-15);
        assert_eq!(p.surrogate(1.0), 0.5);
    }

    #[test]
    fn firing_rate_examples() {
        assert_eq!(firing_rate(&Tensor::zeros(&[3, 2])).unwrap(), 0.0);
        assert_eq!(firing_rate(&Tensor::ones(&[3, 2])).unwrap(), 1.0);
        assert_eq!(firing_rate(&t1(&[1., 0., 0., 1.])).unwrap(), 0.5);
        assert!(matches!(firing_rate(&t1(&[2., 0.])), Err(Error::Domain(_))));
    }

    #[test]
    fn graph_lif_matches_run_sequence() {
        let p = NeuronParams::lif(0.25, 0.5).unwrap();
        let x = Tensor::from_fn(&[5, 3], |i| ((i * 7) % 11) as f64 / 10.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let s = lif(&mut g, xv, &p, SpikeFn::Heaviside).unwrap();
        assert_eq!(g.value(s), &run_sequence(&p, &x).unwrap().0);
    }
}
