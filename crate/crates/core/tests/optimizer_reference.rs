use tml_core::model::NamedParam;
use tml_core::optim::{AdamWConfig, OptimizerState};
use tml_core::Tensor;

/// Scalar AdamW, one parameter at a time.
struct Reference {
    m: f64,
    v: f64,
    t: i32,
}

impl Reference {
    fn step(&mut self, p: f64, g: f64, c: &AdamWConfig) -> f64 {
        self.t += 1;
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * g;
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * g * g;
        let m_hat = self.m / (1.0 - c.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - c.beta2.powi(self.t));
        p - c.lr * c.weight_decay * p - c.lr * m_hat / (v_hat.sqrt() + c.eps)
    }
}

/// f(a, b) = 3 a^2 / 2 + a b + b^2 (positive definite).
fn grad(a: f64, b: f64) -> (f64, f64) {
    (3.0 * a + b, a + 2.0 * b)
}

#[test]
fn quadratic_trajectory_matches_scalar_reference() {
    let cfg = AdamWConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
    let mut params = vec![
        NamedParam { name: "a".into(), value: Tensor::<f64>::scalar(1.5) },
        NamedParam { name: "b".into(), value: Tensor::<f64>::scalar(-0.75) },
    ];
    let mut state = OptimizerState::new(&params).unwrap();
    let (mut ra, mut rb) = (Reference { m: 0.0, v: 0.0, t: 0 }, Reference { m: 0.0, v: 0.0, t: 0 });
    let (mut a, mut b) = (1.5, -0.75);
    for step in 0..200 {
        let (ga, gb) = grad(params[0].value.item().unwrap(), params[1].value.item().unwrap());
        let grads = [Tensor::scalar(ga), Tensor::scalar(gb)];
        state.step(&mut params, &[Some(&grads[0]), Some(&grads[1])], &cfg).unwrap();
        let (ga, gb) = grad(a, b);
        (a, b) = (ra.step(a, ga, &cfg), rb.step(b, gb, &cfg));
        let (pa, pb) = (params[0].value.item().unwrap(), params[1].value.item().unwrap());
        assert!((pa - a).abs() <= 1e-7 && (pb - b).abs() <= 1e-7, "step {step}: ({pa},{pb}) vs ({a},{b})");
    }
    assert_eq!(state.step, 200);
    assert!(a.abs() < 0.1 && b.abs() < 0.1, "did not approach the minimum: ({a},{b})");
}

#[test]
fn first_step_magnitude_is_lr() {
    let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.1, ..AdamWConfig::default() };
    let mut params = vec![NamedParam { name: "w".into(), value: Tensor::<f64>::scalar(1.0) }];
    let mut state = OptimizerState::new(&params).unwrap();
    let g = Tensor::scalar(1.0);
    state.step(&mut params, &[Some(&g)], &cfg).unwrap();
    let moved = 1.0 - params[0].value.item().unwrap();
    assert!((moved - cfg.lr * (1.0 + cfg.weight_decay)).abs() < 1e-9, "moved {moved}");
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut params = vec![NamedParam { name: "w".into(), value: Tensor::<f32>::full([3, 2], 0.25).unwrap() }];
    let before = params[0].value.clone();
    let mut state = OptimizerState::new(&params).unwrap();
    let g = Tensor::zeros([3, 2]).unwrap();
    for _ in 0..3 {
        state.step(&mut params, &[Some(&g)], &cfg).unwrap();
    }
    assert_eq!(params[0].value, before);
}
