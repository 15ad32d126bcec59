use crate::counters::{OpCounter, Stage};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, softmax_rows, Real};

use super::{HeadParams, PhysicalStates};

/// Scaled dot-product self-attention over the `M` slice tokens followed by
/// the output projection: `softmax(QKᵀ/√C_h) V W_o`.
pub fn states_attention_counted<T: Real>(
    s: &PhysicalStates<T>,
    p: &HeadParams<T>,
    ctr: &mut OpCounter,
) -> Result<PhysicalStates<T>> {
    let (m, c) = s.0.shape();
    if m == 0 {
        return Err(Error::invalid("state attention needs at least one slice"));
    }
    let scale = T::from_f64_lossy(1.0 / (c as f64).sqrt());
    for _ in 0..3 {
        ctr.matmul(Stage::Attention, m, c, c);
    }
    let q = matmul(&s.0, &p.wq)?;
    let k = matmul(&s.0, &p.wk)?;
    let v = matmul(&s.0, &p.wv)?;
    ctr.matmul(Stage::Attention, m, c, m);
    ctr.softmax(Stage::Attention, m * m);
    let a = softmax_rows(&matmul_nt(&q, &k)?.scale(scale))?;
    ctr.matmul(Stage::Attention, m, m, c);
    let z = matmul(&a, &v)?;
    ctr.matmul(Stage::Attention, m, c, c);
    Ok(PhysicalStates(matmul(&z, &p.wo)?))
}

pub fn states_attention<T: Real>(s: &PhysicalStates<T>, p: &HeadParams<T>) -> Result<PhysicalStates<T>> {
    states_attention_counted(s, p, &mut OpCounter::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, rel_diff, Matrix, Rng};

    #[test]
    fn single_token_is_projected_value() {
        let mut rng = Rng::seed(3);
        let p = HeadParams::<f64>::init(4, 1, &mut rng);
        let s: Matrix = rng.uniform_matrix(1, 4, -1.0, 1.0);
        let out = states_attention(&PhysicalStates(s.clone()), &p).unwrap();
        let expect = matmul(&matmul(&s, &p.wv).unwrap(), &p.wo).unwrap();
        assert!(max_abs_diff(out.values(), &expect) < 1e-15);
    }

    #[test]
    fn zero_keys_average_values() {
        let mut rng = Rng::seed(5);
        let mut p = HeadParams::<f64>::init(3, 4, &mut rng);
        p.wk = Matrix::zeros(3, 3);
        let s: Matrix = rng.uniform_matrix(4, 3, -1.0, 1.0);
        let out = states_attention(&PhysicalStates(s.clone()), &p).unwrap();
        let v = matmul(&s, &p.wv).unwrap();
        let mean = Matrix::from_vec(1, 3, v.col_sums().iter().map(|x| x / 4.0).collect()).unwrap();
        let expect = matmul(&mean, &p.wo).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                assert!((out.values()[(i, k)] - expect[(0, k)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matches_enumeration() {
        let mut rng = Rng::seed(9);
        let p = HeadParams::<f64>::init(2, 3, &mut rng);
        let s: Matrix = rng.uniform_matrix(3, 2, -1.0, 1.0);
        let lin = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..2).map(|k| x[0] * w[(0, k)] + x[1] * w[(1, k)]).collect()
        };
        let q: Vec<_> = (0..3).map(|i| lin(s.row(i), &p.wq)).collect();
        let k: Vec<_> = (0..3).map(|i| lin(s.row(i), &p.wk)).collect();
        let v: Vec<_> = (0..3).map(|i| lin(s.row(i), &p.wv)).collect();
        let mut rows = Vec::new();
        for i in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|x| x.exp()).sum();
            let mut mix = [0.0; 2];
            for j in 0..3 {
                let a = scores[j].exp() / z;
                mix[0] += a * v[j][0];
                mix[1] += a * v[j][1];
            }
            rows.push(lin(&mix, &p.wo));
        }
        let oracle = Matrix::from_rows(&rows).unwrap();
        let out = states_attention(&PhysicalStates(s), &p).unwrap();
        assert!(rel_diff(out.values(), &oracle) <= 1e-12);
    }
}
