//! Kernel outputs against independent reference computations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadgps::nn::*;

/// `y[i,j] = sum_t x[i + I_h t, j + I_w t] k[r - t]`, written from the
/// definition with explicit bounds tests.
fn direct_sum(x: &[f64], h: usize, w: usize, dir: (i64, i64), k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut y = vec![0.0; h * w];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut s = 0.0;
            for t in -r..=r {
                let a = i + dir.0 * t;
                let b = j + dir.1 * t;
                if (0..h as i64).contains(&a) && (0..w as i64).contains(&b) {
                    s += x[(a as usize) * w + b as usize] * k[(r - t) as usize];
                }
            }
            y[i as usize * w + j as usize] = s;
        }
    }
    y
}

/// Same operator as a sum of shifted copies of `x`, one per tap.
fn shift_add(x: &[f64], h: usize, w: usize, dir: (i64, i64), k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut y = vec![0.0; h * w];
    for (idx, &tap) in k.iter().enumerate() {
        let t = r - idx as i64;
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let (a, b) = (i + dir.0 * t, j + dir.1 * t);
                if (0..h as i64).contains(&a) && (0..w as i64).contains(&b) {
                    y[i as usize * w + j as usize] += tap * x[a as usize * w + b as usize];
                }
            }
        }
    }
    y
}

/// Naive transposed convolution straight from the scatter definition.
fn naive_tconv(x: &Tensor4<f64>, wt: &Tensor4<f64>, s: usize) -> Vec<f64> {
    let [n, cin, h, w] = x.dims;
    let cout = wt.dims[1];
    let (oh, ow) = (h * s, w * s);
    let mut y = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for c in 0..cin {
            for i in 0..h {
                for j in 0..w {
                    for o in 0..cout {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let r = (s * i + ki) as i64 - 1;
                                let q = (s * j + kj) as i64 - 1;
                                if r >= 0 && q >= 0 && (r as usize) < oh && (q as usize) < ow {
                                    y[((b * cout + o) * oh + r as usize) * ow + q as usize] +=
                                        x.at(b, c, i, j) * wt.at(c, o, ki, kj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (p, q)| m.max((p - q).abs())) / scale
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn worked_example_by_hand() {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    let f = Filter1D::new(Direction::Horizontal, vec![1.0, 2.0, 3.0]).unwrap();
    let y = dir_tconv1d(&x, 3, 3, &f).unwrap();
    assert_eq!(y, direct_sum(&x, 3, 3, (0, 1), &[1.0, 2.0, 3.0]));
    assert_eq!(y[0], 4.0);
    assert_eq!(y[4], 3.0 * 4.0 + 2.0 * 5.0 + 1.0 * 6.0);
}

#[test]
fn two_references_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in Direction::ALL {
        let x = random_vec(9 * 11, &mut rng);
        let k = random_vec(9, &mut rng);
        let a = direct_sum(&x, 9, 11, d.indicator(), &k);
        let b = shift_add(&x, 9, 11, d.indicator(), &k);
        assert!(max_rel(&a, &b) < 1e-14);
    }
}

#[test]
fn horizontal_is_conv_with_reversed_taps() {
    // correlation with k reversed, i.e. a textbook 1D convolution per row
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (4, 12);
    let x = random_vec(h * w, &mut rng);
    let k = random_vec(5, &mut rng);
    let y = dir_tconv1d(&x, h, w, &Filter1D::new(Direction::Horizontal, k.clone()).unwrap()).unwrap();
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (m, &km) in k.iter().enumerate() {
                // sum_m k[m] x[j + r - m]
                let col = j as i64 + 2 - m as i64;
                if (0..w as i64).contains(&col) {
                    s += km * x[i * w + col as usize];
                }
            }
            assert!((y[i * w + j] - s).abs() < 1e-14);
        }
    }
}

#[test]
fn strided_impulse_vertical_line() {
    let mut x = vec![0.0; 5 * 5];
    x[2 * 5 + 3] = 1.0;
    let taps: Vec<f64> = (1..=9).map(f64::from).collect();
    let f = Filter1D::new(Direction::Vertical, taps.clone()).unwrap();
    let y = dir_tconv1d_strided(&x, 5, 5, &f, 2).unwrap();
    // hand scatter: y[4 - t, 6] += k[4 - t] for t in -4..=4
    let mut expect = vec![0.0; 10 * 10];
    for t in -4i64..=4 {
        expect[((4 - t) * 10 + 6) as usize] += taps[(4 - t) as usize];
    }
    assert_eq!(y, expect);
}

#[test]
fn strided_impulse_is_centred_for_every_direction() {
    let taps: Vec<f64> = (1..=9).map(f64::from).collect();
    for d in Direction::ALL {
        let (ih, iw) = d.indicator();
        let mut x = vec![0.0; 6 * 6];
        x[3 * 6 + 2] = 1.0;
        let y = dir_tconv1d_strided(&x, 6, 6, &Filter1D::new(d, taps.clone()).unwrap(), 2).unwrap();
        let mut expect = vec![0.0; 12 * 12];
        for t in -4i64..=4 {
            let (a, b) = (6 - ih * t, 4 - iw * t);
            if (0..12).contains(&a) && (0..12).contains(&b) {
                expect[(a * 12 + b) as usize] = taps[(4 - t) as usize];
            }
        }
        assert_eq!(y, expect, "{d:?}");
        // the centre tap lands on (2i, 2j)
        assert_eq!(y[6 * 12 + 4], 5.0);
    }
}

#[test]
fn tconv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in [1, 2] {
        let x = Tensor4::from_vec([2, 3, 6, 5], random_vec(2 * 3 * 30, &mut rng)).unwrap();
        let wt = Tensor4::from_vec([3, 4, 3, 3], random_vec(3 * 4 * 9, &mut rng)).unwrap();
        let y = tconv3x3(&x, &wt, s).unwrap();
        assert!(max_rel(&y.data, &naive_tconv(&x, &wt, s)) <= 1e-12);
    }
}

#[test]
fn decoder_matches_stagewise_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (cin, cmid, cout, s) = (2, 8, 3, 2);
    let p = DecoderBlockParams::random(cin, cmid, cout, 4, s, 1.0, &mut rng).unwrap();
    let (h, w) = (5, 6);
    let x = Tensor4::from_vec([1, cin, h, w], random_vec(cin * h * w, &mut rng)).unwrap();
    let y = decoder_block_forward(&x, &p).unwrap();

    // reduce
    let z: Vec<Vec<f64>> = (0..cmid)
        .map(|m| {
            (0..h * w)
                .map(|px| (0..cin).map(|c| p.reduce[m * cin + c] * x.plane(0, c)[px]).sum())
                .collect()
        })
        .collect();
    // directional banks through the public strided op, concatenated H, V, F, B
    let q = cmid / 4;
    let mut v = Vec::new();
    for d in 0..4 {
        for o in 0..q {
            let mut acc = vec![0.0; h * w * s * s];
            for (c, zc) in z.iter().enumerate() {
                let part = dir_tconv1d_strided(zc, h, w, p.filter(d, o, c), s).unwrap();
                acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            assert_eq!(p.filter(d, o, 0).direction, Direction::ALL[d]);
            v.push(acc);
        }
    }
    // relu, expand
    for o in 0..cout {
        let expect: Vec<f64> = (0..h * w * s * s)
            .map(|px| (0..cmid).map(|m| p.expand[o * cmid + m] * v[m][px].max(0.0)).sum())
            .collect();
        assert!(max_rel(y.plane(0, o), &expect) < 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = DecoderBlockParams::random(2, 4, 2, 4, 2, 1.0, &mut rng).unwrap();
    let x = Tensor4::from_vec([1, 2, 4, 4], random_vec(32, &mut rng)).unwrap();
    let g = decoder_block_backward(&x, &p, &Tensor4::zeros([1, 2, 8, 8])).unwrap();
    assert!(g.input.data.iter().chain(&g.params).all(|&v| v == 0.0));
    assert!(decoder_block_backward(&x, &p, &Tensor4::zeros([1, 2, 4, 4])).is_err());
}

#[test]
fn linear_input_gradient_is_independent_of_x() {
    let f = Filter1D::new(Direction::ForwardDiagonal, vec![0.5, -1.0, 2.0, 0.25, 1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let u = random_vec(6 * 8 * 4, &mut rng);
    let (g1, _) = dir_tconv1d_backward(&random_vec(48, &mut rng), 6, 8, &f, 2, &u).unwrap();
    let (g2, _) = dir_tconv1d_backward(&random_vec(48, &mut rng), 6, 8, &f, 2, &u).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn parity_closed_form() {
    for c_mid in [4usize, 16, 64] {
        let p = DecoderBlockParams::<f64>::zeros(c_mid, c_mid, c_mid, DEFAULT_RADIUS, 2).unwrap();
        // four groups of c_mid/4 filters, each over c_mid inputs, 9 taps
        assert_eq!(p.directional_param_count(), 4 * (c_mid / 4) * c_mid * 9);
        assert_eq!(BaselineBank { c_in: c_mid, c_out: c_mid }.param_count(), c_mid * c_mid * 9);
        assert!(parity_check(&p, BaselineBank { c_in: c_mid, c_out: c_mid }));
    }
    assert_eq!(Filter1D::<f64>::identity(Direction::Horizontal, DEFAULT_RADIUS).taps().len(), 9);
    let p = DecoderBlockParams::<f64>::zeros(8, 8, 8, 4, 1).unwrap();
    assert!(!parity_check(&p, BaselineBank { c_in: 8, c_out: 4 }));
}

fn direction() -> impl Strategy<Value = Direction> {
    prop::sample::select(Direction::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gather_matches_direct_sum(h in 1usize..20, w in 1usize..20, r in 1usize..5, d in direction(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(h * w, &mut rng);
        let k = random_vec(2 * r + 1, &mut rng);
        let y = dir_tconv1d(&x, h, w, &Filter1D::new(d, k.clone()).unwrap()).unwrap();
        prop_assert_eq!(y, direct_sum(&x, h, w, d.indicator(), &k));
    }

    #[test]
    fn scatter_equals_gather_at_stride_one(h in 1usize..20, w in 1usize..20, d in direction(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(h * w, &mut rng);
        let f = Filter1D::new(d, random_vec(9, &mut rng)).unwrap();
        prop_assert_eq!(dir_tconv1d_strided(&x, h, w, &f, 1).unwrap(), dir_tconv1d(&x, h, w, &f).unwrap());
    }

    #[test]
    fn strided_is_linear(h in 1usize..12, w in 1usize..12, s in 1usize..3, d in direction(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Filter1D::new(d, random_vec(9, &mut rng)).unwrap();
        let (x1, x2) = (random_vec(h * w, &mut rng), random_vec(h * w, &mut rng));
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
        let lhs = dir_tconv1d_strided(&mix, h, w, &f, s).unwrap();
        let y1 = dir_tconv1d_strided(&x1, h, w, &f, s).unwrap();
        let y2 = dir_tconv1d_strided(&x2, h, w, &f, s).unwrap();
        let rhs: Vec<f64> = y1.iter().zip(&y2).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_rel(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn strided_adjoint_identity(h in 1usize..12, w in 1usize..12, s in 1usize..3, d in direction(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Filter1D::new(d, random_vec(9, &mut rng)).unwrap();
        let x = random_vec(h * w, &mut rng);
        let u = random_vec(h * w * s * s, &mut rng);
        let y = dir_tconv1d_strided(&x, h, w, &f, s).unwrap();
        let (gx, _) = dir_tconv1d_backward(&x, h, w, &f, s, &u).unwrap();
        let lhs: f64 = y.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1e-300));
    }

    #[test]
    fn tconv_adjoint_identity(cin in 1usize..4, cout in 1usize..4, h in 1usize..7, w in 1usize..7, s in 1usize..3, seed in any::<u64>()) {
        let layer = TConv3x3 {
            weights: Tensor4::from_vec([cin, cout, 3, 3], random_vec(cin * cout * 9, &mut ChaCha8Rng::seed_from_u64(seed))).unwrap(),
            stride: s,
        };
        prop_assert!(adjoint_check(&layer, [1, cin, h, w], seed).unwrap() < 1e-10);
        prop_assert!(linearity_check(&layer, [1, cin, h, w], seed).unwrap() < 1e-12);
    }

    #[test]
    fn parity_holds_for_every_legal_block(q in 1usize..17, cin in 1usize..9, cout in 1usize..9) {
        let c_mid = 4 * q;
        let p = DecoderBlockParams::<f64>::zeros(cin, c_mid, cout, DEFAULT_RADIUS, 2).unwrap();
        let bank = BaselineBank { c_in: c_mid, c_out: c_mid };
        prop_assert!(parity_check(&p, bank));
        prop_assert_eq!(p.param_count(), c_mid * cin + 9 * c_mid * c_mid + cout * c_mid);
    }
}
