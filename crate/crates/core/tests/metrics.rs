use proptest::prelude::*;
use pyramidfill_core::metrics::{l1_metric, psnr, ssim};
use pyramidfill_core::Tensor;
use serde::Deserialize;

fn splitmix(x: u64) -> u64 {
    let mut x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The integer-hash image pairs the reference fixture was computed on.
fn hash_pair(k: u64) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (16 + 2 * k as usize, 40 - k as usize);
    let r = 4 + 6 * k as i64;
    let n = 3 * h * w;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let va = (splitmix(k * 1_000_003 + 2 * i) % 256) as i64;
        let d = (splitmix(k * 1_000_003 + 2 * i + 1) % (2 * r as u64 + 1)) as i64;
        let vb = (va + d - r).clamp(0, 255);
        a.push(va as f64 / 255.0);
        b.push(vb as f64 / 255.0);
    }
    (
        Tensor::from_vec(a, &[1, 3, h, w]).unwrap(),
        Tensor::from_vec(b, &[1, 3, h, w]).unwrap(),
    )
}

#[derive(Deserialize)]
struct Reference {
    k: u64,
    height: usize,
    width: usize,
    ssim: f64,
}

#[test]
fn ssim_matches_scikit_image_reference() {
    let refs: Vec<Reference> =
        serde_json::from_str(include_str!("fixtures/ssim_reference.json")).unwrap();
    assert_eq!(refs.len(), 20);
    for r in refs {
        let (a, b) = hash_pair(r.k);
        assert_eq!(a.shape(), &[1, 3, r.height, r.width]);
        let s = ssim(&a, &b).unwrap();
        assert!((s - r.ssim).abs() < 1e-4, "pair {}: {s} vs {}", r.k, r.ssim);
    }
}

/// Direct per-window SSIM with explicit 2-D Gaussian weights.
fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut win = [[0.0; 11]; 11];
    let mut total_w = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    for ch in 0..c {
        let mut plane_sum = 0.0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let g = win[i][j] / total_w;
                        let va = a.at(&[0, ch, y + i, x + j]);
                        let vb = b.at(&[0, ch, y + i, x + j]);
                        ma += g * va;
                        mb += g * vb;
                        aa += g * va * va;
                        bb += g * vb * vb;
                        ab += g * va * vb;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                plane_sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        acc += plane_sum / ((h - 10) * (w - 10)) as f64;
    }
    acc / c as f64
}

#[test]
fn ssim_matches_windowed_oracle() {
    for k in 0..4 {
        let (a, b) = hash_pair(k);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn psnr_and_l1_match_formula() {
    let (a, b) = hash_pair(3);
    let n = a.numel() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
    assert!((l1_metric(&a, &b).unwrap() - l1).abs() < 1e-12);
    let half = Tensor::<f64>::full(&[1, 3, 4, 4], 0.5);
    let zero = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
    assert_eq!(l1_metric(&half, &half).unwrap(), 0.0);
    assert_eq!(l1_metric(&half, &zero).unwrap(), 0.5);
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let (a, _) = hash_pair(1);
    let mut last = f64::INFINITY;
    for step in 1..=10 {
        let amp = step as f64 * 0.01;
        let noisy: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + amp * ((splitmix(i as u64) % 2001) as f64 / 1000.0 - 1.0))
            .collect();
        let noisy = Tensor::from_vec(noisy, a.shape()).unwrap();
        let p = psnr(&a, &noisy).unwrap();
        assert!(p < last, "amplitude {amp}: {p} >= {last}");
        last = p;
    }
}

#[test]
fn ssim_prefers_small_offset_over_shuffle() {
    // smooth gradient image as a stand-in for natural image statistics
    let (h, w) = (32, 32);
    let img: Vec<f64> = (0..3 * h * w)
        .map(|i| {
            let (y, x) = ((i / w) % h, i % w);
            0.2 + 0.6 * ((x as f64 / 6.0).sin() * 0.5 + 0.5) * (y as f64 / h as f64)
        })
        .collect();
    let a = Tensor::from_vec(img.clone(), &[1, 3, h, w]).unwrap();
    let offset = Tensor::from_vec(img.iter().map(|v| v + 0.02).collect(), &[1, 3, h, w]).unwrap();
    let mut shuffled = img;
    let len = shuffled.len();
    for i in (1..len).rev() {
        let j = (splitmix(i as u64) % (i as u64 + 1)) as usize;
        shuffled.swap(i, j);
    }
    let shuffled = Tensor::from_vec(shuffled, &[1, 3, h, w]).unwrap();
    assert!(ssim(&a, &offset).unwrap() > ssim(&a, &shuffled).unwrap());
}

fn image_pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (11usize..16, 11usize..16).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(0.0f64..1.0, 3 * h * w),
            prop::collection::vec(0.0f64..1.0, 3 * h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    Tensor::from_vec(a, &[1, 3, h, w]).unwrap(),
                    Tensor::from_vec(b, &[1, 3, h, w]).unwrap(),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_are_symmetric((a, b) in image_pair()) {
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(l1_metric(&a, &b).unwrap(), l1_metric(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
