//! Adam optimizer with exportable slot state.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::graph::Param;

/// First/second moment slots keyed by parameter name, for checkpointing.
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub struct Adam {
    params: Vec<Param>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<Param>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        for p in &params {
            assert!(seen.insert(p.name()), "duplicate parameter name {}", p.name());
        }
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.value().raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(p.value().raw_dim()))
            .collect();
        Adam {
            params,
            m,
            v,
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        for (i, p) in self.params.iter().enumerate() {
            let g = p.grad();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            Zip::from(&mut *m)
                .and(&g)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            Zip::from(&mut *v)
                .and(&g)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            p.update_with(|value, _| {
                Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            });
        }
    }

    pub fn export_state(&self) -> AdamState {
        let mut slots = BTreeMap::new();
        for (i, p) in self.params.iter().enumerate() {
            slots.insert(
                p.name(),
                (
                    self.m[i].iter().copied().collect(),
                    self.v[i].iter().copied().collect(),
                ),
            );
        }
        AdamState {
            step: self.step,
            lr: self.lr,
            slots,
        }
    }

    /// Restore moments and step count. Panics if names or sizes disagree
    /// with the parameters this optimizer was built over.
    pub fn load_state(&mut self, state: &AdamState) {
        self.step = state.step;
        self.lr = state.lr;
        for (i, p) in self.params.iter().enumerate() {
            let (m, v) = state
                .slots
                .get(&p.name())
                .unwrap_or_else(|| panic!("missing optimizer slot for {}", p.name()));
            assert_eq!(m.len(), self.m[i].len(), "slot size mismatch for {}", p.name());
            self.m[i] = ArrayD::from_shape_vec(self.m[i].raw_dim(), m.clone()).expect("shape");
            self.v[i] = ArrayD::from_shape_vec(self.v[i].raw_dim(), v.clone()).expect("shape");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::IxDyn;

    fn quadratic_step(p: &Param, opt: &mut Adam) -> f64 {
        // loss = sum((p - 3)^2)
        opt.zero_grads();
        let g = Graph::new();
        let x = g.param(p);
        let loss = x.add_scalar(-3.0).square().sum_all();
        g.backward(&loss);
        opt.step();
        loss.scalar()
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let p = Param::new("x", ArrayD::from_elem(IxDyn(&[4]), 10.0));
        let mut opt = Adam::new(vec![p.clone()], 0.1, 0.9, 0.999);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            last = quadratic_step(&p, &mut opt);
        }
        assert!(last < 1e-3, "loss after training: {last}");
        assert!(p.value().iter().all(|&v| (v - 3.0).abs() < 0.05));
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let run = |resume_at: Option<u64>| -> Vec<f64> {
            let p = Param::new("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
            let mut opt = Adam::new(vec![p.clone()], 0.05, 0.9, 0.999);
            let mut state = None;
            for step in 0..20u64 {
                if Some(step) == resume_at {
                    state = Some(opt.export_state());
                }
                quadratic_step(&p, &mut opt);
            }
            if let Some(state) = state {
                // Rebuild a fresh optimizer mid-run and replay the tail.
                let p2 = Param::new("x", ArrayD::from_elem(IxDyn(&[2]), 5.0));
                let mut opt2 = Adam::new(vec![p2.clone()], 0.05, 0.9, 0.999);
                for _ in 0..resume_at.unwrap() {
                    quadratic_step(&p2, &mut opt2);
                }
                let mut opt3 = Adam::new(vec![p2.clone()], 0.05, 0.9, 0.999);
                opt3.load_state(&state);
                assert_eq!(opt3.step_count(), resume_at.unwrap());
                for _ in resume_at.unwrap()..20 {
                    quadratic_step(&p2, &mut opt3);
                }
                return p2.value().iter().copied().collect();
            }
            p.value().iter().copied().collect()
        };
        let straight = run(None);
        let resumed = run(Some(10));
        assert_eq!(straight, resumed);
    }
}
