use tml_core::autograd::{Tape, Var};
use tml_core::loss::{smooth_l1, smooth_l1_elem, smooth_l1_grad, smooth_l1_tensor};
use tml_core::metrics::{psnr, ssim, PSNR_CAP_DB};
use tml_core::{ImageBuffer, Rng, Tensor};

fn filled(d: f64) -> Tensor<f64> {
    Tensor::full([2, 3, 4, 5], d).unwrap()
}

#[test]
fn smooth_l1_constant_differences() {
    let zero = Tensor::zeros([2, 3, 4, 5]).unwrap();
    for (d, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
        let got = smooth_l1_tensor(&filled(d), &zero).unwrap();
        assert!((got - want).abs() <= 1e-7, "d={d}: {got}");
        let got32 = smooth_l1_tensor(&filled(d).cast::<f32>(), &zero.cast()).unwrap();
        assert!((got32 as f64 - want).abs() <= 1e-7, "f32 d={d}: {got32}");
    }
}

#[test]
fn smooth_l1_branches_meet_at_one() {
    for sign in [1.0, -1.0] {
        let (inner, outer) = (sign * (1.0 - 1e-4), sign * (1.0 + 1e-4));
        let quad = |d: f64| 0.5 * d * d;
        let lin = |d: f64| d.abs() - 0.5;
        assert!((smooth_l1_elem(inner) - quad(inner)).abs() < 1e-15);
        assert!((smooth_l1_elem(outer) - lin(outer)).abs() < 1e-15);
        assert!((smooth_l1_elem(inner) - smooth_l1_elem(outer)).abs() < 2.1e-4);
        assert!((smooth_l1_grad(inner) - smooth_l1_grad(outer)).abs() < 2.1e-4);
        // both branch formulas agree exactly on the boundary itself
        assert_eq!(quad(sign), lin(sign));
    }
}

#[test]
fn smooth_l1_gradient_is_mean_of_elementwise_derivative() {
    let mut rng = Rng::new(3);
    let pred = Tensor::<f64>::randn([1, 2, 3, 3], 0.0, 2.0, &mut rng).unwrap();
    let target = Tensor::<f64>::zeros([1, 2, 3, 3]).unwrap();
    let tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let loss = smooth_l1(&p, &Var::constant(target)).unwrap();
    let g = tape.backward(&loss).unwrap();
    let n = pred.len() as f64;
    for (gi, d) in g.get(&p).unwrap().data().iter().zip(pred.data()) {
        let want = if d.abs() < 1.0 { *d } else { d.signum() };
        assert!((gi - want / n).abs() < 1e-15);
    }
}

#[test]
fn psnr_closed_forms() {
    let black = ImageBuffer::filled(16, 16, [0.0; 3]);
    let grey = ImageBuffer::filled(16, 16, [0.5; 3]);
    let white = ImageBuffer::filled(16, 16, [1.0; 3]);
    assert!((psnr(&black, &grey, 1.0).unwrap() - 6.0206).abs() <= 1e-4);
    assert!(psnr(&black, &white, 1.0).unwrap().abs() <= 1e-12);
    assert_eq!(psnr(&grey, &grey, 1.0).unwrap(), PSNR_CAP_DB);
    assert!(psnr(&grey, &ImageBuffer::filled(8, 8, [0.5; 3]), 1.0).is_err());
}

fn noise_image(w: usize, h: usize, rng: &mut Rng) -> ImageBuffer {
    ImageBuffer::new(w, h, (0..w * h * 3).map(|_| rng.uniform() as f32).collect()).unwrap()
}

/// Mean SSIM evaluated window by window with explicit 2-D Gaussian weights.
fn ssim_direct(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (w, h) = (a.width(), a.height());
    let (win, sigma) = (11usize, 1.5f64);
    let mut weights = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            weights[i * win + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|x| *x /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for c in 0..3 {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let g = weights[i * win + j];
                        let p = a.pixel(x0 + j, y0 + i)[c] as f64;
                        let q = b.pixel(x0 + j, y0 + i)[c] as f64;
                        mx += g * p;
                        my += g * q;
                        sxx += g * p * p;
                        syy += g * q * q;
                        sxy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += acc / count as f64;
    }
    per_channel / 3.0
}

#[test]
fn ssim_matches_direct_window_evaluation() {
    let mut rng = Rng::new(8);
    let a = noise_image(24, 19, &mut rng);
    let b = a.map(|v| (0.7 * v + 0.1).min(1.0));
    let c = noise_image(24, 19, &mut rng);
    for (p, q) in [(&a, &b), (&a, &c), (&b, &c)] {
        let got = ssim(p, q).unwrap();
        let want = ssim_direct(p, q);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn ssim_identity_and_inversion() {
    let mut rng = Rng::new(9);
    let a = noise_image(32, 32, &mut rng);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-6);
    let inverted = a.map(|v| 1.0 - v);
    let direct = ssim_direct(&inverted, &a);
    assert!(direct < 0.5, "oracle {direct}");
    assert!(ssim(&inverted, &a).unwrap() < 0.5);
    let flat = ImageBuffer::filled(12, 12, [0.3; 3]);
    assert!((ssim(&flat, &flat).unwrap() - 1.0).abs() <= 1e-6);
    assert!(ssim(&ImageBuffer::filled(10, 12, [0.3; 3]), &ImageBuffer::filled(10, 12, [0.3; 3])).is_err());
}
