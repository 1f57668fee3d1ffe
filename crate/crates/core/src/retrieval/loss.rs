//! In-batch contrastive loss: each query's positive is the paragraph at the
//! same batch position and every other paragraph is a negative.

use super::RetrievalError;

/// Gradients of the loss with respect to each query and paragraph vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub queries: Vec<Vec<f64>>,
    pub paragraphs: Vec<Vec<f64>>,
}

fn check(q: &[Vec<f64>], p: &[Vec<f64>]) -> Result<usize, RetrievalError> {
    if q.is_empty() {
        return Err(RetrievalError::EmptyBatch);
    }
    if q.len() != p.len() {
        return Err(RetrievalError::BatchMismatch {
            queries: q.len(),
            paragraphs: p.len(),
        });
    }
    let d = q[0].len();
    for v in q.iter().chain(p) {
        if v.len() != d {
            return Err(RetrievalError::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
    }
    Ok(d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row `i` of the similarity matrix, its log-sum-exp and softmax.
fn row(q: &[f64], p: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let s: Vec<f64> = p.iter().map(|pj| dot(q, pj)).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    (s, lse)
}

/// `(1/b) sum_i [logsumexp_j(q_i . p_j) - q_i . p_i]`.
pub fn contrastive_loss(queries: &[Vec<f64>], paragraphs: &[Vec<f64>]) -> Result<f64, RetrievalError> {
    check(queries, paragraphs)?;
    let b = queries.len();
    if b == 1 {
        return Ok(0.0);
    }
    let terms = crate::par::map_range(b, |i| {
        let (s, lse) = row(&queries[i], paragraphs);
        lse - s[i]
    });
    Ok(terms.iter().sum::<f64>() / b as f64)
}

pub fn contrastive_loss_grad(queries: &[Vec<f64>], paragraphs: &[Vec<f64>]) -> Result<ContrastiveGrad, RetrievalError> {
    let d = check(queries, paragraphs)?;
    let b = queries.len();
    let rows = crate::par::map_range(b, |i| {
        let (s, lse) = row(&queries[i], paragraphs);
        let probs: Vec<f64> = s.iter().map(|x| (x - lse).exp()).collect();
        (lse - s[i], probs)
    });
    let scale = 1.0 / b as f64;
    let loss = if b == 1 { 0.0 } else { rows.iter().map(|(t, _)| t).sum::<f64>() * scale };
    let mut gq = vec![vec![0.0; d]; b];
    let mut gp = vec![vec![0.0; d]; b];
    for (i, (_, a)) in rows.iter().enumerate() {
        for j in 0..b {
            let w = (a[j] - if i == j { 1.0 } else { 0.0 }) * scale;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                gq[i][k] += w * paragraphs[j][k];
                gp[j][k] += w * queries[i][k];
            }
        }
    }
    Ok(ContrastiveGrad {
        loss,
        queries: gq,
        paragraphs: gp,
    })
}
