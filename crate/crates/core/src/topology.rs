//! Statistical joint affinity from Bhattacharyya distances between joint Gaussians.

use crate::error::{KgsError, Result};
use crate::splat::{PrimitiveGrid, Sym2};

/// Per-sample `V×V` affinity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorAdjacency {
    pub joints: usize,
    pub matrix: Vec<f64>,
    pub source: Option<String>,
}

impl PriorAdjacency {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.joints + j]
    }

    /// Element-wise mean of several priors of the same size.
    pub fn mean(priors: &[&PriorAdjacency]) -> Result<PriorAdjacency> {
        let first = priors
            .first()
            .ok_or_else(|| KgsError::Contract("cannot average zero priors".into()))?;
        let mut matrix = vec![0.0; first.matrix.len()];
        for prior in priors {
            if prior.joints != first.joints {
                return Err(KgsError::Dimension(format!(
                    "prior over {} joints mixed with prior over {}",
                    prior.joints, first.joints
                )));
            }
            for (acc, x) in matrix.iter_mut().zip(&prior.matrix) {
                *acc += x;
            }
        }
        let n = priors.len() as f64;
        matrix.iter_mut().for_each(|x| *x /= n);
        Ok(PriorAdjacency {
            joints: first.joints,
            matrix,
            source: None,
        })
    }
}

fn check_spd(sigma: &Sym2, which: &str) -> Result<()> {
    if sigma.is_positive_definite() && sigma.det().is_finite() {
        Ok(())
    } else {
        Err(KgsError::Matrix(format!(
            "covariance {which} is not symmetric positive definite: {sigma:?}"
        )))
    }
}

/// Bhattacharyya distance between `N(μ_i, Σ_i)` and `N(μ_j, Σ_j)`.
pub fn bhattacharyya_distance(
    mu_i: [f64; 2],
    sigma_i: &Sym2,
    mu_j: [f64; 2],
    sigma_j: &Sym2,
) -> Result<f64> {
    check_spd(sigma_i, "i")?;
    check_spd(sigma_j, "j")?;
    Ok(distance_unchecked(mu_i, sigma_i, mu_j, sigma_j))
}

fn distance_unchecked(mu_i: [f64; 2], sigma_i: &Sym2, mu_j: [f64; 2], sigma_j: &Sym2) -> f64 {
    let avg = sigma_i.average(sigma_j);
    let det_avg = avg.det();
    let inv = Sym2::new(avg.yy / det_avg, -avg.xy / det_avg, avg.xx / det_avg);
    let d = [mu_i[0] - mu_j[0], mu_i[1] - mu_j[1]];
    let mahalanobis = 0.125 * inv.quad_form(d);
    // ln(det_avg / sqrt(det_i det_j)) written to stay exact when both covariances match
    let shape = 0.5 * (det_avg.ln() - 0.5 * (sigma_i.det().ln() + sigma_j.det().ln()));
    // the log-det term is ≥ 0 analytically; clip rounding noise
    mahalanobis + shape.max(0.0)
}

/// `A(i,j)` = mean over frames and views of `exp(-D_B(i_t, j_t))`.
pub fn build_prior_adjacency(grids: &[PrimitiveGrid]) -> Result<PriorAdjacency> {
    let first = grids
        .first()
        .ok_or_else(|| KgsError::Contract("prior adjacency needs at least one view".into()))?;
    let (frames, joints) = (first.frames, first.joints);
    if frames == 0 {
        return Err(KgsError::Contract("prior adjacency needs at least one frame".into()));
    }
    for grid in grids {
        if grid.frames != frames || grid.joints != joints || grid.primitives.len() != frames * joints {
            return Err(KgsError::Dimension(format!(
                "view {} grid is {}×{} with {} primitives, expected {frames}×{joints}",
                grid.view,
                grid.frames,
                grid.joints,
                grid.primitives.len()
            )));
        }
        for prim in &grid.primitives {
            check_spd(&prim.sigma, "primitive")?;
        }
    }
    let mut matrix = vec![0.0; joints * joints];
    for grid in grids {
        for t in 0..frames {
            let prims = grid.frame(t);
            for i in 0..joints {
                for j in i + 1..joints {
                    let (a, b) = (&prims[i], &prims[j]);
                    let affinity = (-distance_unchecked(a.mu, &a.sigma, b.mu, &b.sigma)).exp();
                    matrix[i * joints + j] += affinity;
                }
            }
        }
    }
    let count = (frames * grids.len()) as f64;
    for i in 0..joints {
        matrix[i * joints + i] = 1.0;
        for j in i + 1..joints {
            let value = matrix[i * joints + j] / count;
            matrix[i * joints + j] = value;
            matrix[j * joints + i] = value;
        }
    }
    Ok(PriorAdjacency {
        joints,
        matrix,
        source: None,
    })
}
