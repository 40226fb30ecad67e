//! Small dense-vector helpers shared by every stage.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity, `None` when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(a.iter().map(|x| x / n).collect())
}

/// L2-normalized mean of the input rows; `None` for no rows or a zero mean.
pub fn normalized_mean<'a, I>(rows: I, dim: usize) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; dim];
    let mut any = false;
    for row in rows {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
        any = true;
    }
    if !any {
        return None;
    }
    normalized(&acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_hand_vectors() {
        assert_eq!(cosine(&[1.0, 0.0, 0.0, 0.0], &[0.6, 0.8, 0.0, 0.0]), Some(0.6));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), None);
    }

    #[test]
    fn mean_of_orthonormal_pair() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let m = normalized_mean([&e1[..], &e2[..]], 2).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((m[0] - h).abs() < 1e-15 && (m[1] - h).abs() < 1e-15);
        assert!((norm(&m) - 1.0).abs() < 1e-15);
    }
}
