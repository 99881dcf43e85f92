//! Two-branch potential-outcome heads and the factual loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Mlp;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Independent `d_model -> hidden -> 1` regressors for control (`head0.`)
/// and treated (`head1.`) outcomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heads {
    pub head0: Mlp,
    pub head1: Mlp,
}

impl Heads {
    pub fn new(store: &mut ParamStore, d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Heads {
            head0: Mlp::new(store, "head0", &[d_model, hidden, 1], rng),
            head1: Mlp::new(store, "head1", &[d_model, hidden, 1], rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.head0.ids();
        ids.extend(self.head1.ids());
        ids
    }

    /// Both potential outcomes `([n,1], [n,1])` for every unit.
    pub fn predict_potential(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedding: Var,
    ) -> Result<(Var, Var)> {
        let y0 = self.head0.forward(g, store, embedding)?;
        let y1 = self.head1.forward(g, store, embedding)?;
        Ok((y0, y1))
    }
}

/// Mean squared error of the factual branch: unit `i` is scored by
/// branch `t_i` only, so the other branch gets exactly zero gradient.
pub fn factual_loss(g: &mut Graph, y0: Var, y1: Var, t: &[bool], y: &[f64]) -> Result<Var> {
    let n = t.len();
    if g.shape(y0) != [n, 1] || g.shape(y1) != [n, 1] || y.len() != n {
        return Err(Error::shape("factual_loss", g.shape(y0), &[t.len(), y.len()]));
    }
    let mask: Vec<f64> = t.iter().map(|&ti| if ti { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
    let m1 = g.constant(Tensor::new(vec![n, 1], mask)?);
    let m0 = g.constant(Tensor::new(vec![n, 1], inv)?);
    let a = g.mul(y1, m1)?;
    let b = g.mul(y0, m0)?;
    let pred = g.add(a, b)?;
    let target = g.constant(Tensor::new(vec![n, 1], y.to_vec())?);
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap())
    }

    #[test]
    fn hand_mse() {
        let mut g = Graph::new();
        let y1 = column(&mut g, &[3.0, 99.0]);
        let y0 = column(&mut g, &[-99.0, 1.0]);
        let l = factual_loss(&mut g, y0, y1, &[true, false], &[3.0, 2.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.5);
        let l = factual_loss(&mut g, y0, y1, &[true, false], &[3.0, 1.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn length_mismatch() {
        let mut g = Graph::new();
        let y = column(&mut g, &[1.0, 2.0]);
        assert!(factual_loss(&mut g, y, y, &[true], &[1.0]).is_err());
    }

    #[test]
    fn zero_and_identical_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, 4, 4, &mut rng);
        let x = Tensor::from_rows(&[[0.5, -1.0, 2.0, 0.0], [1.0, 1.0, 1.0, 1.0]]).unwrap();

        let mut same = store.clone();
        for (a, b) in heads.head0.ids().into_iter().zip(heads.head1.ids()) {
            let t = same.get(a).tensor.clone();
            same.get_mut(b).tensor = t;
        }
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let (y0, y1) = heads.predict_potential(&mut g, &same, e).unwrap();
        assert_eq!(g.value(y0), g.value(y1));

        for id in heads.ids() {
            store.get_mut(id).tensor.fill(0.0);
        }
        let mut g = Graph::new();
        let e = g.constant(x);
        let (y0, y1) = heads.predict_potential(&mut g, &store, e).unwrap();
        assert!(g.value(y0).data().iter().chain(g.value(y1).data()).all(|&v| v == 0.0));
    }

    #[test]
    fn unused_branch_gets_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, 3, 3, &mut rng);
        for arm in [false, true] {
            store.zero_grad();
            let mut g = Graph::new();
            let e = g.constant(Tensor::from_rows(&[[0.4, -0.3, 1.1]]).unwrap());
            let (y0, y1) = heads.predict_potential(&mut g, &store, e).unwrap();
            let l = factual_loss(&mut g, y0, y1, &[arm], &[0.7]).unwrap();
            g.backward_into(l, &mut store).unwrap();
            let idle = if arm { &heads.head0 } else { &heads.head1 };
            for id in idle.ids() {
                assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
