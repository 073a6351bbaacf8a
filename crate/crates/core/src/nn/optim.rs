use super::{Gradients, ParamId, ParamStore, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient and for
    /// which `select` returns true.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, select: impl Fn(&str) -> bool) {
        self.step += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<ParamId>>() {
            let Some(g) = grads.get(id) else { continue };
            if !select(params.name(id)) {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(&g.shape));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(&g.shape));
            let p = params.value_mut(id);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let mut g = Gradients::zeros_like(&ps);
        g.by_param[id.0] = Some(Tensor::from_vec(&[2], vec![3.0, -0.5]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut ps, &g, |_| true);
        let v = &ps.value(id).data;
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::from_vec(&[1], vec![5.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Gradients::zeros_like(&ps);
            let x = ps.value(id).data[0];
            g.by_param[id.0] = Some(Tensor::scalar(2.0 * (x - 2.0)));
            opt.step(&mut ps, &g, |_| true);
        }
        assert!((ps.value(id).data[0] - 2.0).abs() < 1e-2);
    }
}
