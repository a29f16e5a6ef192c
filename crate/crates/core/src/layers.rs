//! Parameterised building blocks shared by every module.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamId, ParamStore, Tape, Var};

/// `y = x W + b`, with `x` holding one input per row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = use_bias.then(|| {
            store.add(
                format!("{name}.bias"),
                crate::numerics::Matrix::zeros(1, fan_out),
            )
        });
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// Gated recurrent cell:
///
/// ```text
/// z  = σ(x Wz + bz + h Uz)
/// r  = σ(x Wr + br + h Ur)
/// n  = tanh(x Wn + bn + (r ∘ h) Un)
/// h' = (1 − z) ∘ n + z ∘ h
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub update_in: Linear,
    pub update_rec: Linear,
    pub reset_in: Linear,
    pub reset_rec: Linear,
    pub cand_in: Linear,
    pub cand_rec: Linear,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            update_in: Linear::new(store, &format!("{name}.update_in"), d_in, d_hidden, use_bias, rng),
            update_rec: Linear::new(store, &format!("{name}.update_rec"), d_hidden, d_hidden, false, rng),
            reset_in: Linear::new(store, &format!("{name}.reset_in"), d_in, d_hidden, use_bias, rng),
            reset_rec: Linear::new(store, &format!("{name}.reset_rec"), d_hidden, d_hidden, false, rng),
            cand_in: Linear::new(store, &format!("{name}.cand_in"), d_in, d_hidden, use_bias, rng),
            cand_rec: Linear::new(store, &format!("{name}.cand_rec"), d_hidden, d_hidden, false, rng),
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let zx = self.update_in.forward(tape, store, x)?;
        let zh = self.update_rec.forward(tape, store, h)?;
        let z = tape.add(zx, zh)?;
        let z = tape.sigmoid(z)?;

        let rx = self.reset_in.forward(tape, store, x)?;
        let rh = self.reset_rec.forward(tape, store, h)?;
        let r = tape.add(rx, rh)?;
        let r = tape.sigmoid(r)?;

        let nx = self.cand_in.forward(tape, store, x)?;
        let rh = tape.mul(r, h)?;
        let nh = self.cand_rec.forward(tape, store, rh)?;
        let n = tape.add(nx, nh)?;
        let n = tape.tanh(n)?;

        // h' = n + z ∘ (h − n)
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        tape.add(n, keep)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            &self.update_in,
            &self.update_rec,
            &self.reset_in,
            &self.reset_rec,
            &self.cand_in,
            &self.cand_rec,
        ]
        .iter()
        .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
        .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::{sigmoid, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain-loop GRU step used as an independent reference.
    pub(crate) fn reference_gru(store: &ParamStore, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let affine = |l: &Linear, v: &[f64]| -> Vec<f64> {
            let w = store.value(l.weight);
            (0..w.cols())
                .map(|j| {
                    let mut s = l.bias.map_or(0.0, |b| store.value(b).get(0, j));
                    for (i, vi) in v.iter().enumerate() {
                        s += vi * w.get(i, j);
                    }
                    s
                })
                .collect()
        };
        let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>();
        let z: Vec<f64> = add(affine(&cell.update_in, x), affine(&cell.update_rec, h)).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = add(affine(&cell.reset_in, x), affine(&cell.reset_rec, h)).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = add(affine(&cell.cand_in, x), affine(&cell.cand_rec, &rh)).into_iter().map(f64::tanh).collect();
        (0..h.len()).map(|i| (1.0 - z[i]) * n[i] + z[i] * h[i]).collect()
    }

    #[test]
    fn gru_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 3, 4, true, &mut rng);
        for id in cell.params() {
            let v = store.value(id);
            let noisy = Matrix::new(v.rows(), v.cols(), v.data().iter().enumerate().map(|(i, x)| x + 0.01 * i as f64).collect()).unwrap();
            store.set_value(id, noisy).unwrap();
        }
        let x = [0.3, -0.7, 1.1];
        let h = [0.5, -0.2, 0.0, 0.9];
        let mut tape = Tape::new();
        let xv = tape.constant(Matrix::row_vector(&x).unwrap());
        let hv = tape.constant(Matrix::row_vector(&h).unwrap());
        let out = cell.step(&mut tape, &store, xv, hv).unwrap();
        let expected = reference_gru(&store, &cell, &x, &h);
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_weight_gru_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 2, 3, true, &mut rng);
        for id in cell.params() {
            let (r, c) = store.value(id).shape();
            store.set_value(id, Matrix::zeros(r, c)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, -2.0]).unwrap());
        let h = tape.constant(Matrix::row_vector(&[2.0, -4.0, 1.0]).unwrap());
        let out = cell.step(&mut tape, &store, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -2.0, 0.5]);
    }
}
