//! Three-state hidden Markov model with three observation symbols. Its
//! likelihood is available exactly through the forward recursion, which
//! makes it an oracle for the particle filter.
#![allow(dead_code)]

use epiworld::error::Result;
use epiworld::exec::Execution;
use epiworld::filter::{update, FilterSettings, ParticleBelief, StateSpaceModel};
use epiworld::rng::RngStream;
use rand::Rng;

pub struct Hmm {
    pub init: [f64; 3],
    pub trans: [[f64; 3]; 3],
    pub emit: [[f64; 3]; 3],
}

fn categorical(p: &[f64; 3], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    2
}

impl Hmm {
    pub fn toy() -> Self {
        Hmm {
            init: [0.5, 0.3, 0.2],
            trans: [[0.8, 0.15, 0.05], [0.1, 0.8, 0.1], [0.05, 0.15, 0.8]],
            emit: [[0.45, 0.35, 0.2], [0.3, 0.4, 0.3], [0.2, 0.35, 0.45]],
        }
    }

    fn emission(&self, y: usize, s: usize) -> f64 {
        self.emit[s][y]
    }

    /// Draws a hidden path and its observations. The first observation is
    /// emitted after one transition from the initial draw, as in the filter.
    pub fn simulate(&self, steps: usize, seed: u64) -> Vec<usize> {
        let mut rng = RngStream::new(seed).rng();
        let mut s = categorical(&self.init, &mut rng);
        (0..steps)
            .map(|_| {
                s = categorical(&self.trans[s], &mut rng);
                categorical(&self.emit[s], &mut rng)
            })
            .collect()
    }

    pub fn forward_loglik(&self, obs: &[usize]) -> f64 {
        let mut alpha = self.init;
        let mut ll = 0.0;
        for &y in obs {
            let mut next = [0.0; 3];
            for (j, n) in next.iter_mut().enumerate() {
                let pred: f64 = (0..3).map(|i| alpha[i] * self.trans[i][j]).sum();
                *n = pred * self.emission(y, j);
            }
            let total: f64 = next.iter().sum();
            ll += total.ln();
            alpha = next.map(|v| v / total);
        }
        ll
    }

    pub fn pf_loglik(&self, obs: &[usize], particles: usize, seed: u64, execution: Execution) -> f64 {
        let root = RngStream::new(seed);
        let mut init_rng = root.child(0).rng();
        let ps = (0..particles).map(|_| categorical(&self.init, &mut init_rng)).collect();
        let mut bel = ParticleBelief::uniform(ps, 0).unwrap();
        let settings = FilterSettings { execution, ..Default::default() };
        for (t, y) in obs.iter().enumerate() {
            bel = update(self, &bel, &(), y, &settings, root.child(1).child(t as u64), t as u32 + 1).unwrap();
        }
        bel.cum_loglik
    }
}

impl StateSpaceModel for Hmm {
    type State = usize;
    type Control = ();
    type Obs = usize;

    fn propagate(&self, x: &usize, _: &(), rng: RngStream) -> Result<usize> {
        Ok(categorical(&self.trans[*x], &mut rng.rng()))
    }

    fn log_likelihood(&self, y: &usize, x: &usize, _: &()) -> f64 {
        self.emission(*y, *x).ln()
    }
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
