//! Classification losses and their gradients with respect to logits.

use crate::error::{Error, Result};

/// Floor applied to student probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of one sample and its gradient on the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -p[label].max(PROB_FLOOR).ln();
    let mut g = p;
    g[label] -= 1.0;
    (loss, g)
}

fn check_distribution(p: &[f64], what: &str, row: usize) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "{what} row {row} is not a probability distribution (sum {sum})"
        )));
    }
    Ok(())
}

/// Batch-mean KL divergence `KL(teacher || student)` in nats:
/// `-(1/n) sum_i sum_c t_c log(s_c / t_c)`.
pub fn distill_loss(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "distill_loss: {} teacher rows vs {} student rows",
            teacher.len(),
            student.len()
        )));
    }
    if teacher.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (t, s)) in teacher.iter().zip(student).enumerate() {
        if t.len() != s.len() {
            return Err(Error::Shape(format!("distill_loss: row {i} class counts differ")));
        }
        check_distribution(t, "teacher", i)?;
        check_distribution(s, "student", i)?;
        for (&tc, &sc) in t.iter().zip(s) {
            if tc > 0.0 {
                total -= tc * (sc.max(PROB_FLOOR) / tc).ln();
            }
        }
    }
    Ok(total / teacher.len() as f64)
}

/// Per-sample distillation loss against teacher probabilities, with the
/// gradient on the student logits (`softmax(student) - teacher`).
pub fn distill_sample(logits: &[f64], teacher: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = teacher
        .iter()
        .zip(&p)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| -t * (s.max(PROB_FLOOR) / t).ln())
        .sum();
    let g = p.iter().zip(teacher).map(|(s, t)| s - t).collect();
    (loss, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn distill_examples() {
        let p = vec![vec![0.2, 0.3, 0.5]];
        assert_eq!(distill_loss(&p, &p).unwrap(), 0.0);
        let l = distill_loss(&[vec![0.5, 0.5]], &[vec![0.25, 0.75]]).unwrap();
        let want = -(0.5 * 0.5f64.ln() + 0.5 * 1.5f64.ln());
        assert!((l - want).abs() < 1e-15);
        assert!((l - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn distill_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let k = rng.random_range(2..10);
            let t = random_dist(&mut rng, k);
            let s = random_dist(&mut rng, k);
            assert!(distill_loss(&[t.clone()], &[s]).unwrap() >= -1e-12);
            assert_eq!(distill_loss(&[t.clone()], &[t]).unwrap(), 0.0);
        }
    }

    #[test]
    fn distill_rejects_invalid_rows() {
        assert!(distill_loss(&[vec![0.5, 0.6]], &[vec![0.5, 0.5]]).is_err());
        assert!(distill_loss(&[vec![1.5, -0.5]], &[vec![0.5, 0.5]]).is_err());
        assert!(distill_loss(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn sample_gradients_match_finite_differences() {
        let logits = [0.3, -1.2, 2.0];
        let t = [0.1, 0.2, 0.7];
        let (_, g) = distill_sample(&logits, &t);
        let (_, gce) = cross_entropy(&logits, 1);
        for j in 0..3 {
            let h = 1e-6;
            let mut p = logits;
            p[j] += h;
            let mut m = logits;
            m[j] -= h;
            let fd = (distill_sample(&p, &t).0 - distill_sample(&m, &t).0) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-8);
            let fd = (cross_entropy(&p, 1).0 - cross_entropy(&m, 1).0) / (2.0 * h);
            assert!((fd - gce[j]).abs() < 1e-8);
        }
    }
}
