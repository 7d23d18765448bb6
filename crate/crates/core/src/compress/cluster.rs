//! Per-tensor weight sharing by one-dimensional k-means.
//!
//! Centroids start linearly spaced over the value range, points go to the
//! nearest centroid (ties to the lower index), empty clusters keep their
//! centroid, and iteration stops when no assignment changes or after
//! [`MAX_ITERATIONS`] rounds.

use crate::error::{Error, Result};
use crate::model::{ClusterCodebook, Model};

use super::{eligible_weights, float_data_mut};

pub const MAX_ITERATIONS: usize = 300;

/// Largest cluster count; indices are stored in at most one byte.
pub const MAX_CLUSTERS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<f64>,
    /// Centroid index per input value, in input order.
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances right after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

pub fn kmeans_1d(values: &[f64], k: usize) -> Result<KMeans> {
    if k < 2 {
        return Err(Error::invalid(format!("cluster count must be at least 2, got {k}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cannot cluster non-finite values"));
    }
    if values.is_empty() {
        return Ok(KMeans {
            centroids: vec![0.0; k],
            assignment: Vec::new(),
            iterations: 0,
            objective: Vec::new(),
            converged: true,
        });
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let mut centroids: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();

    let mut assign = vec![usize::MAX; sorted.len()];
    let mut next = vec![0usize; sorted.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        assign_sorted(&sorted, &centroids, &mut next);
        if next == assign {
            converged = true;
            break;
        }
        std::mem::swap(&mut assign, &mut next);
        iterations += 1;
        objective.push(sorted.iter().zip(&assign).map(|(x, &j)| (x - centroids[j]).powi(2)).sum());
        update_centroids(&sorted, &assign, &mut centroids);
    }
    let mut assignment = vec![0; values.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = assign[pos];
    }
    Ok(KMeans { centroids, assignment, iterations, objective, converged })
}

/// Nearest-centroid assignment for ascending `sorted`. Lloyd updates keep
/// the centroids in non-decreasing order, so the nearest index only moves
/// forward along the sweep.
fn assign_sorted(sorted: &[f64], centroids: &[f64], out: &mut [usize]) {
    let k = centroids.len();
    let mut j = 0;
    for (x, slot) in sorted.iter().zip(out.iter_mut()) {
        loop {
            let mut n = j + 1;
            while n < k && centroids[n] == centroids[j] {
                n += 1;
            }
            if n < k && (x - centroids[n]).abs() < (x - centroids[j]).abs() {
                j = n;
            } else {
                break;
            }
        }
        *slot = j;
    }
}

fn update_centroids(sorted: &[f64], assign: &[usize], centroids: &mut [f64]) {
    let mut start = 0;
    while start < sorted.len() {
        let j = assign[start];
        let mut end = start;
        let mut sum = 0.0;
        while end < sorted.len() && assign[end] == j {
            sum += sorted[end];
            end += 1;
        }
        centroids[j] = sum / (end - start) as f64;
        start = end;
    }
}

/// Clusters one tensor. With `preserve_zeros`, exact zeros are exempt and
/// stay zero; otherwise every element takes part.
pub fn cluster_slice(values: &mut [f32], k: usize, preserve_zeros: bool) -> Result<(ClusterCodebook, KMeans)> {
    let exempt: Vec<bool> = values.iter().map(|&v| preserve_zeros && v == 0.0).collect();
    let members: Vec<f64> = values.iter().zip(&exempt).filter(|(_, &e)| !e).map(|(&v, _)| v as f64).collect();
    let km = kmeans_1d(&members, k)?;
    let centroids: Vec<f32> = km.centroids.iter().map(|&c| c as f32).collect();
    let mut assignment = Vec::with_capacity(values.len());
    let mut member = km.assignment.iter();
    for (v, &e) in values.iter_mut().zip(&exempt) {
        if e {
            assignment.push(0);
            *v = 0.0;
        } else {
            let j = *member.next().expect("one assignment per member");
            assignment.push(j as u16);
            *v = centroids[j];
        }
    }
    let exempt = exempt.iter().any(|&e| e).then_some(exempt);
    Ok((ClusterCodebook { centroids, assignment, exempt }, km))
}

/// Replaces every eligible weight tensor by a `k`-entry codebook.
pub fn cluster_weights(m: &Model, k: usize, preserve_zeros: bool) -> Result<Model> {
    cluster_weights_traced(m, k, preserve_zeros).map(|(model, _)| model)
}

/// Like [`cluster_weights`], also returning each tensor's k-means run.
pub fn cluster_weights_traced(m: &Model, k: usize, preserve_zeros: bool) -> Result<(Model, Vec<(String, KMeans)>)> {
    check_clusters(k)?;
    let mut out = m.clone();
    let mut runs = Vec::new();
    for name in eligible_weights(m) {
        let (cb, km) = cluster_slice(float_data_mut(&mut out, &name)?, k, preserve_zeros)?;
        out.codebooks.insert(name.clone(), cb);
        runs.push((name, km));
    }
    Ok((out, runs))
}

pub(crate) fn check_clusters(k: usize) -> Result<()> {
    if !(2..=MAX_CLUSTERS).contains(&k) {
        return Err(Error::invalid(format!("cluster count must be in 2..={MAX_CLUSTERS}, got {k}")));
    }
    Ok(())
}
