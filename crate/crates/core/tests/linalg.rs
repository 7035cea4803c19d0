use chanprune::linalg::{
    find_representative_rows, least_squares_row, pseudo_inverse, qr_column_pivot, svd, Matrix,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn shapes(seed: u64) -> impl Iterator<Item = (ChaCha8Rng, usize, usize)> {
    (0..60).map(move |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + t);
        let r = rng.gen_range(1..15);
        let c = rng.gen_range(1..15);
        (rng, r, c)
    })
}

#[test]
fn singular_values_match_nalgebra() {
    for (mut rng, r, c) in shapes(0) {
        let m = random_matrix(&mut rng, r, c);
        let ours = svd(&m).unwrap().singular_values;
        let mut theirs: Vec<f64> = to_na(&m).singular_values().iter().cloned().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(ours.len(), theirs.len());
        for (a, b) in ours.iter().zip(&theirs) {
            assert!(
                (a - b).abs() <= 1e-10 * theirs[0].max(1.0),
                "{r}x{c}: {a} vs {b}"
            );
        }
    }
}

/// Greedy pivoting by modified Gram-Schmidt: take the remaining column with
/// the largest residual norm (lowest index on ties), then project it out.
fn gram_schmidt_pivots(m: &Matrix) -> (Vec<usize>, Vec<f64>) {
    let mut cols: Vec<Vec<f64>> = (0..m.cols()).map(|j| m.column(j)).collect();
    let mut left: Vec<usize> = (0..m.cols()).collect();
    let mut order = Vec::new();
    let mut norms = Vec::new();
    for _ in 0..m.rows().min(m.cols()) {
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (pos, &best) = left
            .iter()
            .enumerate()
            .max_by(|(_, &a), (_, &b)| norm(&cols[a]).total_cmp(&norm(&cols[b])).then(b.cmp(&a)))
            .unwrap();
        left.remove(pos);
        let n = norm(&cols[best]);
        order.push(best);
        norms.push(n);
        if n == 0.0 {
            continue;
        }
        let q: Vec<f64> = cols[best].iter().map(|x| x / n).collect();
        for &j in &left {
            let d: f64 = q.iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            for (x, qi) in cols[j].iter_mut().zip(&q) {
                *x -= d * qi;
            }
        }
    }
    (order, norms)
}

#[test]
fn pivots_match_gram_schmidt() {
    for (mut rng, r, c) in shapes(100) {
        let m = random_matrix(&mut rng, r, c);
        let qr = qr_column_pivot(&m).unwrap();
        let (order, norms) = gram_schmidt_pivots(&m);
        assert_eq!(&qr.perm[..order.len()], &order[..], "{r}x{c}");
        for (k, n) in norms.iter().enumerate() {
            assert!((qr.r[(k, k)].abs() - n).abs() <= 1e-9, "{r}x{c} step {k}");
        }
    }
}

#[test]
fn exact_rank_is_revealed() {
    for (mut rng, r, c) in shapes(200) {
        let k = rng.gen_range(1..=r.min(c));
        let m = random_matrix(&mut rng, r, k)
            .matmul(&random_matrix(&mut rng, k, c))
            .unwrap();
        let s = svd(&m).unwrap().singular_values;
        let rank = s.iter().filter(|&&v| v > 1e-10 * s[0]).count();
        assert_eq!(rank, k, "{r}x{c} rank {k}: {s:?}");
        let qr = qr_column_pivot(&m).unwrap();
        let d = qr.r[(k - 1, k - 1)].abs();
        assert!(d > 1e-10 * s[0]);
        if k < r.min(c) {
            assert!(qr.r[(k, k)].abs() <= 1e-10 * s[0].max(1.0));
        }
    }
}

#[test]
fn pinv_and_least_squares_match_nalgebra() {
    for (mut rng, r, c) in shapes(300) {
        let m = random_matrix(&mut rng, r, c);
        let ours = pseudo_inverse(&m, 1e-12).unwrap();
        let theirs = to_na(&m).pseudo_inverse(1e-12).unwrap();
        for i in 0..c {
            for j in 0..r {
                assert!((ours[(i, j)] - theirs[(i, j)]).abs() <= 1e-8 * theirs.norm().max(1.0));
            }
        }
        let b = random_matrix(&mut rng, 1, c);
        let s = least_squares_row(&b, &m).unwrap();
        let want = to_na(&b) * to_na(&m).pseudo_inverse(1e-12).unwrap();
        for (a, w) in s.iter().zip(want.iter()) {
            assert!(
                (a - w).abs() <= 1e-8 * want.norm().max(1.0),
                "{r}x{c}: {a} vs {w}"
            );
        }
    }
}

#[test]
fn representative_rows_are_distinct_and_spanning() {
    for (mut rng, r, c) in shapes(400) {
        let n = c.max(r);
        let a = random_matrix(&mut rng, r, n);
        let keep = rng.gen_range(1..=r);
        let kept = find_representative_rows(&a, keep).unwrap();
        let mut sorted = kept.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), keep);
        let sub = a.select_rows(&kept).unwrap();
        let s = svd(&sub).unwrap().singular_values;
        assert!(
            s.last().unwrap() > &1e-8,
            "kept rows {kept:?} are dependent"
        );
    }
}

#[test]
fn zero_matrix_pinv_is_zero() {
    let z = Matrix::zeros(3, 4);
    let p = pseudo_inverse(&z, 1e-10).unwrap();
    assert_eq!((p.rows(), p.cols()), (4, 3));
    assert!(p.data().iter().all(|&v| v == 0.0));
}
