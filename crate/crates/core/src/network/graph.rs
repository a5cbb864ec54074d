//! Physical skeleton graph and its spatial partitioning.

use std::collections::VecDeque;

use crate::tensor::Tensor;

/// Hop distance of every joint from `root`; unreachable joints get `usize::MAX`.
fn hops_from(root: usize, joints: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut hops = vec![usize::MAX; joints];
    let mut queue = VecDeque::from([root]);
    hops[root] = 0;
    while let Some(j) = queue.pop_front() {
        for &(a, b) in edges {
            let next = if a == j {
                b
            } else if b == j {
                a
            } else {
                continue;
            };
            if hops[next] == usize::MAX {
                hops[next] = hops[j] + 1;
                queue.push_back(next);
            }
        }
    }
    hops
}

/// Symmetric 0/1 adjacency with self-loops.
pub fn physical_adjacency(joints: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut a = Tensor::eye(joints);
    for &(i, j) in edges {
        a.data_mut()[i * joints + j] = 1.0;
        a.data_mut()[j * joints + i] = 1.0;
    }
    a
}

/// Splits the physical adjacency into `subsets` 0/1 matrices that sum to it.
///
/// With three subsets, entry `(i, j)` goes to subset 0 when `j` is as far from
/// the root as `i` (including `j = i`), 1 when `j` is closer, 2 when farther.
pub fn partition(joints: usize, edges: &[(usize, usize)], root: usize, subsets: usize) -> Vec<Tensor> {
    let full = physical_adjacency(joints, edges);
    if subsets == 1 {
        return vec![full];
    }
    let hops = hops_from(root, joints, edges);
    let mut parts = vec![Tensor::zeros(&[joints, joints]); 3];
    for i in 0..joints {
        for j in 0..joints {
            if full.data()[i * joints + j] == 0.0 {
                continue;
            }
            let k = match hops[j].cmp(&hops[i]) {
                std::cmp::Ordering::Equal => 0,
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Greater => 2,
            };
            parts[k].data_mut()[i * joints + j] = 1.0;
        }
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_partition_sums_to_physical_graph() {
        let edges = [(0, 1), (1, 2), (2, 3)];
        let parts = partition(4, &edges, 0, 3);
        let full = physical_adjacency(4, &edges);
        for idx in 0..16 {
            let total: f64 = parts.iter().map(|p| p.data()[idx]).sum();
            assert_eq!(total, full.data()[idx]);
        }
        assert_eq!(parts[0], Tensor::eye(4));
        // joint 2's parent is 1, its child is 3
        assert_eq!(parts[1].data()[2 * 4 + 1], 1.0);
        assert_eq!(parts[2].data()[2 * 4 + 3], 1.0);
    }

    #[test]
    fn physical_adjacency_is_symmetric() {
        let a = physical_adjacency(3, &[(0, 2)]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.data()[i * 3 + j], a.data()[j * 3 + i]);
            }
        }
    }
}
