use rand::Rng;

use super::dense::sigmoid;
use super::{NnError, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    // gate activations, each of length hidden, in order i, f, g, o
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Single-layer LSTM cell.
///
/// Gate pre-activations are `W_x x + W_h h + b` with rows stacked in the
/// order input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    h: Vec<f64>,
    c: Vec<f64>,
    cache: Vec<StepCache>,
}

impl LstmCell {
    /// Glorot-uniform gate weights; forget-gate bias 1, other biases 0.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let g = 4 * hidden_dim;
        let bx = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let bh = (6.0 / (2 * hidden_dim) as f64).sqrt();
        let w_x = store.add_uniform(format!("{name}/w_x"), &[g, input_dim], ParamGroup::Network, bx, rng)?;
        let w_h = store.add_uniform(format!("{name}/w_h"), &[g, hidden_dim], ParamGroup::Network, bh, rng)?;
        let mut b = vec![0.0; g];
        b[hidden_dim..2 * hidden_dim].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.add(format!("{name}/bias"), &[g], ParamGroup::Network, b)?;
        Ok(Self {
            name: name.to_string(),
            input_dim,
            hidden_dim,
            w_x,
            w_h,
            bias,
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
            cache: Vec::new(),
        })
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden_dim * (self.input_dim + self.hidden_dim + 1)
    }

    pub fn reset_state(&mut self) {
        self.h.iter_mut().for_each(|v| *v = 0.0);
        self.c.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn set_state(&mut self, h: &[f64], c: &[f64]) {
        self.h.copy_from_slice(h);
        self.c.copy_from_slice(c);
    }

    pub fn state(&self) -> (&[f64], &[f64]) {
        (&self.h, &self.c)
    }

    fn gates(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let hd = self.hidden_dim;
        let wx = store.value(self.w_x);
        let wh = store.value(self.w_h);
        let b = store.value(self.bias);
        let mut z = b.to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let row_x = &wx[r * self.input_dim..(r + 1) * self.input_dim];
            let row_h = &wh[r * hd..(r + 1) * hd];
            let mut acc = 0.0;
            for (w, v) in row_x.iter().zip(x) {
                acc += w * v;
            }
            for (w, v) in row_h.iter().zip(&self.h) {
                acc += w * v;
            }
            *zr += acc;
        }
        for (k, v) in z.iter_mut().enumerate() {
            *v = if (2 * hd..3 * hd).contains(&k) { v.tanh() } else { sigmoid(*v) };
        }
        z
    }

    fn advance(&mut self, store: &ParamStore, x: &[f64], record: bool) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        if x.len() != self.input_dim {
            return Err(NnError::Shape {
                what: format!("{} input", self.name),
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let hd = self.hidden_dim;
        let gates = self.gates(store, x);
        let mut c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
            c[k] = f * self.c[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
        if record {
            self.cache.push(StepCache {
                x: x.to_vec(),
                h_prev: std::mem::replace(&mut self.h, h.clone()),
                c_prev: std::mem::replace(&mut self.c, c.clone()),
                gates,
                tanh_c,
            });
        } else {
            self.h.clone_from(&h);
            self.c.clone_from(&c);
        }
        Ok((h, c))
    }

    /// One recurrence step from the stored state; records intermediates.
    pub fn step(&mut self, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        self.advance(store, x, true)
    }

    /// One recurrence step without recording intermediates.
    pub fn step_infer(&mut self, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        self.advance(store, x, false)
    }

    /// Reverses the most recent recorded step. Takes gradients w.r.t. that
    /// step's `(h, c)` and returns gradients w.r.t. `(x, h_prev, c_prev)`.
    pub fn backward_step(
        &mut self,
        store: &mut ParamStore,
        dh: &[f64],
        dc: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), NnError> {
        let cache = self
            .cache
            .pop()
            .ok_or_else(|| NnError::NoForwardCache(self.name.clone()))?;
        let hd = self.hidden_dim;
        let id = self.input_dim;
        let mut dz = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for k in 0..hd {
            let (i, f, g, o) = (
                cache.gates[k],
                cache.gates[hd + k],
                cache.gates[2 * hd + k],
                cache.gates[3 * hd + k],
            );
            let tc = cache.tanh_c[k];
            let d_o = dh[k] * tc;
            let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let d_i = dct * g;
            let d_f = dct * cache.c_prev[k];
            let d_g = dct * i;
            dc_prev[k] = dct * f;
            dz[k] = d_i * i * (1.0 - i);
            dz[hd + k] = d_f * f * (1.0 - f);
            dz[2 * hd + k] = d_g * (1.0 - g * g);
            dz[3 * hd + k] = d_o * o * (1.0 - o);
        }
        {
            let gb = store.grad_mut(self.bias);
            for (g, d) in gb.iter_mut().zip(&dz) {
                *g += d;
            }
        }
        {
            let gx = store.grad_mut(self.w_x);
            for (r, d) in dz.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (g, x) in gx[r * id..(r + 1) * id].iter_mut().zip(&cache.x) {
                    *g += d * x;
                }
            }
        }
        {
            let gh = store.grad_mut(self.w_h);
            for (r, d) in dz.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (g, h) in gh[r * hd..(r + 1) * hd].iter_mut().zip(&cache.h_prev) {
                    *g += d * h;
                }
            }
        }
        let wx = store.value(self.w_x);
        let wh = store.value(self.w_h);
        let mut dx = vec![0.0; id];
        let mut dh_prev = vec![0.0; hd];
        for (r, d) in dz.iter().enumerate() {
            for (acc, w) in dx.iter_mut().zip(&wx[r * id..(r + 1) * id]) {
                *acc += d * w;
            }
            for (acc, w) in dh_prev.iter_mut().zip(&wh[r * hd..(r + 1) * hd]) {
                *acc += d * w;
            }
        }
        // restore the state this step started from
        self.h = cache.h_prev;
        self.c = cache.c_prev;
        Ok((dx, dh_prev, dc_prev))
    }

    /// Runs a whole sequence from a zero state and returns the final hidden state.
    pub fn run_sequence(&mut self, store: &ParamStore, xs: &[Vec<f64>], record: bool) -> Result<Vec<f64>, NnError> {
        self.reset_state();
        let mut h = vec![0.0; self.hidden_dim];
        for x in xs {
            h = self.advance(store, x, record)?.0;
        }
        Ok(h)
    }

    /// Back-propagates a gradient on the final hidden state through all
    /// recorded steps; returns input gradients in sequence order.
    pub fn backward_sequence(&mut self, store: &mut ParamStore, dh_final: &[f64]) -> Result<Vec<Vec<f64>>, NnError> {
        if self.cache.is_empty() {
            return Err(NnError::NoForwardCache(self.name.clone()));
        }
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; self.hidden_dim];
        let mut dxs = Vec::with_capacity(self.cache.len());
        while !self.cache.is_empty() {
            let (dx, dhp, dcp) = self.backward_step(store, &dh, &dc)?;
            dxs.push(dx);
            dh = dhp;
            dc = dcp;
        }
        dxs.reverse();
        Ok(dxs)
    }

    pub fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_fixed_point() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = LstmCell::new(&mut s, "lstm", 3, 4, &mut rng).unwrap();
        for id in [cell.w_x, cell.w_h, cell.bias] {
            s.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let (h, c) = cell.step(&s, &[1.0, -2.0, 0.5]).unwrap();
        assert!(h.iter().chain(&c).all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_preserve_cell() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hd = 3;
        let mut cell = LstmCell::new(&mut s, "lstm", 2, hd, &mut rng).unwrap();
        s.value_mut(cell.w_x).iter_mut().for_each(|v| *v *= 0.1);
        s.value_mut(cell.w_h).iter_mut().for_each(|v| *v *= 0.1);
        {
            let b = s.value_mut(cell.bias);
            b[..hd].iter_mut().for_each(|v| *v = -20.0);
            b[hd..2 * hd].iter_mut().for_each(|v| *v = 20.0);
        }
        let c0 = [0.7, -0.3, 0.1];
        cell.set_state(&[0.0; 3], &c0);
        let (_, c) = cell.step(&s, &[0.4, -0.8]).unwrap();
        for (a, b) in c.iter().zip(c0) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, hd) = (3, 2);
        let mut cell = LstmCell::new(&mut s, "lstm", d, hd, &mut rng).unwrap();
        s.value_mut(cell.bias).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let xs = [[0.5, -1.0, 0.2], [0.1, 0.3, -0.7], [-0.4, 0.9, 0.6]];
        let wx = s.value(cell.w_x).to_vec();
        let wh = s.value(cell.w_h).to_vec();
        let b = s.value(cell.bias).to_vec();
        let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        for x in &xs {
            let pre = |gate: usize, k: usize| {
                let r = gate * hd + k;
                let mut z = b[r];
                for j in 0..d {
                    z += wx[r * d + j] * x[j];
                }
                for j in 0..hd {
                    z += wh[r * hd + j] * h[j];
                }
                z
            };
            let mut hn = vec![0.0; hd];
            let mut cn = vec![0.0; hd];
            for k in 0..hd {
                let i = sig(pre(0, k));
                let f = sig(pre(1, k));
                let g = pre(2, k).tanh();
                let o = sig(pre(3, k));
                cn[k] = f * c[k] + i * g;
                hn[k] = o * cn[k].tanh();
            }
            h = hn;
            c = cn;
            let (hh, cc) = cell.step(&s, x).unwrap();
            for k in 0..hd {
                assert!((hh[k] - h[k]).abs() < 1e-14);
                assert!((cc[k] - c[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gates_in_open_intervals() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = LstmCell::new(&mut s, "lstm", 4, 5, &mut rng).unwrap();
        let z = cell.gates(&s, &[3.0, -2.0, 1.0, 0.5]);
        for (k, v) in z.iter().enumerate() {
            if (10..15).contains(&k) {
                assert!(*v > -1.0 && *v < 1.0);
            } else {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cell = LstmCell::new(&mut s, "lstm", 2, 2, &mut rng).unwrap();
        assert!(cell.backward_sequence(&mut s, &[1.0, 0.0]).is_err());
        assert!(cell.step(&s, &[1.0]).is_err());
    }
}
