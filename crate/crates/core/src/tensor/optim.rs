use super::{ParamStore, Tensor};

/// Moment estimates for Adam, one entry per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = Tensor>) -> Self {
        let m: Vec<Tensor> = shapes.into_iter().map(|t| Tensor::zeros_like(&t)).collect();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.ids().map(|id| Tensor::zeros_like(store.get(id))))
    }
}

/// Pure bias-corrected Adam update: returns the new parameters and state.
pub fn adam_update(
    params: &[Tensor],
    grads: &[Tensor],
    state: &AdamState,
    lr: f64,
) -> (Vec<Tensor>, AdamState) {
    let mut next = state.clone();
    next.step += 1;
    let mut out = params.to_vec();
    for (i, p) in out.iter_mut().enumerate() {
        update_slot(
            p.data_mut(),
            grads[i].data(),
            next.m[i].data_mut(),
            next.v[i].data_mut(),
            next.step,
            (next.beta1, next.beta2, next.epsilon),
            lr,
        );
    }
    (out, next)
}

fn update_slot(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    (b1, b2, eps): (f64, f64, f64),
    lr: f64,
) {
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for j in 0..p.len() {
        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
        let mhat = m[j] / bc1;
        let vhat = v[j] / bc2;
        p[j] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// In-place Adam over a [`ParamStore`], reading the accumulated gradients.
#[derive(Clone, Debug)]
pub struct Adam {
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            state: AdamState::for_store(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.state.step += 1;
        let st = &mut self.state;
        let hyper = (st.beta1, st.beta2, st.epsilon);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let g = store.grad(id).data().to_vec();
            update_slot(
                store.get_mut(id).data_mut(),
                &g,
                st.m[i].data_mut(),
                st.v[i].data_mut(),
                st.step,
                hyper,
                lr,
            );
        }
    }
}

/// Linearly decaying learning rate, clamped to zero past `total_steps`.
pub fn linear_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total_steps as f64)
}
