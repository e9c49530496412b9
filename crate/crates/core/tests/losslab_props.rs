use proptest::prelude::*;
use shortcut_audit::losslab::{
    antisym_loss, arcface_loss, euclidean_total, lorentz_supcon, lorentz_total, max_gradient_error, mirror_negative,
    radius_prior, random_euclidean_batch, random_lorentz_batch, sigma2, target_radius, EuclideanBatch, LorentzBatch,
    LorentzParams, LossEval, Matrix, FD_STEP, FD_TOLERANCE,
};
use shortcut_audit::Result;

type EuclidFn = fn(&EuclideanBatch) -> Result<LossEval>;
type LorentzFn = fn(&LorentzBatch) -> Result<LossEval>;

fn antisym(b: &EuclideanBatch) -> Result<LossEval> {
    antisym_loss(&b.z, &b.z_flip, b.tau)
}

const EUCLID: [(&str, EuclidFn); 3] = [
    ("arcface", arcface_loss),
    ("antisym", antisym),
    ("euclidean_total", euclidean_total),
];
const LORENTZ: [(&str, LorentzFn); 4] = [
    ("lorentz_supcon", lorentz_supcon),
    ("radius_prior", radius_prior),
    ("mirror_negative", mirror_negative),
    ("lorentz_total", lorentz_total),
];

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| m.row(i).to_vec()).collect();
    Matrix::from_rows(&rows).unwrap()
}

fn close(a: &Matrix, b: &Matrix) -> bool {
    let scale = a.max_abs().max(b.max_abs()).max(1.0);
    a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() <= 1e-10 * scale)
}

fn rotation(n: usize, by: usize) -> Vec<usize> {
    (0..n).map(|i| (i + by) % n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn euclidean_losses_are_batch_equivariant(seed in any::<u64>(), by in 1usize..4) {
        let b = random_euclidean_batch(seed, 4, 3, 3, 8);
        let perm = rotation(4, by);
        let p = EuclideanBatch {
            z: permute_rows(&b.z, &perm),
            z_flip: permute_rows(&b.z_flip, &perm),
            labels: perm.iter().map(|&i| b.labels[i]).collect(),
            ..b.clone()
        };
        for (name, f) in EUCLID {
            let (x, y) = (f(&b).unwrap(), f(&p).unwrap());
            prop_assert!((x.value - y.value).abs() <= 1e-12 * x.value.abs().max(1.0), "{}", name);
            for input in ["z", "z_flip"] {
                if let Some(g) = x.grads.get(input) {
                    prop_assert!(close(&permute_rows(g, &perm), y.grad(input)), "{} {}", name, input);
                }
            }
            if let Some(g) = x.grads.get("w") {
                prop_assert!(close(g, y.grad("w")), "{} w", name);
            }
        }
    }

    #[test]
    fn lorentz_losses_are_batch_equivariant(seed in any::<u64>(), by in 1usize..6) {
        let b = random_lorentz_batch(seed, 6, 4, 3, LorentzParams::default());
        let perm = rotation(6, by);
        let p = LorentzBatch {
            tangents: permute_rows(&b.tangents, &perm),
            flip_tangents: permute_rows(&b.flip_tangents, &perm),
            labels: perm.iter().map(|&i| b.labels[i]).collect(),
            solidity: perm.iter().map(|&i| b.solidity[i]).collect(),
            ..b.clone()
        };
        for (name, f) in LORENTZ {
            let (x, y) = (f(&b).unwrap(), f(&p).unwrap());
            prop_assert!((x.value - y.value).abs() <= 1e-12 * x.value.abs().max(1.0), "{}", name);
            for (input, g) in &x.grads {
                prop_assert!(close(&permute_rows(g, &perm), y.grad(input)), "{} {}", name, input);
            }
        }
    }

    #[test]
    fn arcface_ignores_subcentre_order(seed in any::<u64>(), class in 0usize..3, by in 1usize..3) {
        let b = random_euclidean_batch(seed, 4, 3, 3, 8);
        let mut perm: Vec<usize> = (0..9).collect();
        for j in 0..3 {
            perm[class * 3 + j] = class * 3 + (j + by) % 3;
        }
        let p = EuclideanBatch { w: permute_rows(&b.w, &perm), ..b.clone() };
        let (x, y) = (arcface_loss(&b).unwrap(), arcface_loss(&p).unwrap());
        prop_assert!((x.value - y.value).abs() <= 1e-12 * x.value.abs().max(1.0));
        prop_assert!(close(&permute_rows(x.grad("w"), &perm), y.grad("w")));
        prop_assert!(close(x.grad("z"), y.grad("z")));
    }

    #[test]
    fn supcon_only_sees_the_partition(seed in any::<u64>(), offset in 1usize..50) {
        let b = random_lorentz_batch(seed, 6, 4, 3, LorentzParams::default());
        let relabelled = LorentzBatch {
            labels: b.labels.iter().map(|&l| (2 - l) * 7 + offset).collect(),
            ..b.clone()
        };
        let (x, y) = (lorentz_supcon(&b).unwrap(), lorentz_supcon(&relabelled).unwrap());
        prop_assert_eq!(x.value, y.value);
        prop_assert_eq!(x.grads, y.grads);
    }
}

#[test]
fn solidity_maps_are_monotone_on_a_grid() {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let s2: Vec<f64> = grid.iter().map(|&s| sigma2(s).unwrap()).collect();
    let g: Vec<f64> = grid.iter().map(|&s| target_radius(s).unwrap()).collect();
    assert!(s2.windows(2).all(|w| w[1] <= w[0]));
    assert!(g.windows(2).all(|w| w[1] > w[0]));
    assert_eq!((s2[0], s2[100]), (0.9, 0.25));
    assert_eq!((g[0], g[100]), (0.2, 2.0));
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let eb = random_euclidean_batch(seed, 4, 3, 3, 8);
        for (name, f) in EUCLID {
            let err = max_gradient_error(&eb, &f, FD_STEP).unwrap();
            assert!(err < FD_TOLERANCE, "{name} seed {seed}: {err}");
        }
        let lb = random_lorentz_batch(seed, 6, 4, 3, LorentzParams::default());
        for (name, f) in LORENTZ {
            let err = max_gradient_error(&lb, &f, FD_STEP).unwrap();
            assert!(err < FD_TOLERANCE, "{name} seed {seed}: {err}");
        }
    }
}
