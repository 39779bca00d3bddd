use crate::net::ParameterSet;
use crate::tape::Matrix;

/// Adam with bias correction; moments are kept per parameter array.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: vec![None; num_params],
        }
    }

    /// One descent step on the arrays named in `grads`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &[(usize, Matrix)], lr: f64) {
        for (id, g) in grads {
            let st = self.state[*id].get_or_insert_with(|| Moments {
                m: Matrix::zeros(g.dim()),
                v: Matrix::zeros(g.dim()),
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            st.m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            st.v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            let eps = self.eps;
            let value = &mut params.get_mut(*id).value;
            ndarray::Zip::from(value)
                .and(&st.m)
                .and(&st.v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Model, NetConfig};
    use crate::routing::ProblemKind;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = NetConfig {
            embed_dim: 4,
            encoder_layers: 1,
            heads: 1,
            ff_dim: 4,
            critic_layers: 1,
            critic_hidden: 4,
            ..NetConfig::default()
        };
        let mut model = Model::new(ProblemKind::Tsp, cfg, 0, 1.0).unwrap();
        let id = model.layout().log_alpha;
        let mut adam = Adam::new(model.params().len());
        let g = Matrix::from_elem((1, 1), 3.7);
        adam.step(model.params_mut(), &[(id, g)], 0.01);
        assert!((model.log_alpha() + 0.01).abs() < 1e-9);
        // Minimizing (x − 2)² converges.
        model.set_log_alpha(0.0);
        let mut adam = Adam::new(model.params().len());
        for _ in 0..2000 {
            let x = model.log_alpha();
            adam.step(model.params_mut(), &[(id, Matrix::from_elem((1, 1), 2.0 * (x - 2.0)))], 0.05);
        }
        assert!((model.log_alpha() - 2.0).abs() < 1e-3);
    }
}
