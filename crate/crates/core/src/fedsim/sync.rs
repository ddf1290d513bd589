//! Synchronization steps: neighbour averaging, server averaging and the
//! covariance exchange.

use crate::error::{Error, Result};
use crate::gnn::{ModelParams, ParamGroup};
use crate::mtl::{self, MtlConfig, TaskCovariance, WeightedCovariance};
use crate::tensor::{Matrix, ParamId};
use crate::topology::{ConnectionMatrix, MixingMatrix};

use super::client::ClientState;

fn shared_ids(p: &ModelParams) -> Vec<ParamId> {
    p.entries()
        .into_iter()
        .filter(|e| e.1 != ParamGroup::Task)
        .map(|e| e.0)
        .collect()
}

fn check_shapes(states: &[ClientState]) -> Result<()> {
    let Some(first) = states.first() else {
        return Ok(());
    };
    let reference: Vec<(usize, usize)> = first
        .params
        .entries()
        .iter()
        .filter(|e| e.1 != ParamGroup::Task)
        .map(|e| e.2.shape())
        .collect();
    for s in states {
        let shapes: Vec<(usize, usize)> = s
            .params
            .entries()
            .iter()
            .filter(|e| e.1 != ParamGroup::Task)
            .map(|e| e.2.shape())
            .collect();
        if shapes != reference {
            return Err(Error::Invariant(format!(
                "client {} shared parameters differ in shape from client {}",
                s.id, first.id
            )));
        }
        if s.params.readout.task.rows() != first.params.readout.task.rows() {
            return Err(Error::Invariant(format!(
                "client {} task head height differs",
                s.id
            )));
        }
    }
    Ok(())
}

/// Replaces each client's shared groups by a mixing-weighted combination
/// of its neighbours' and averages every task-head column over the
/// neighbours that own the task (hold labels for it), weights
/// renormalized among those owners. A column with no owner in the
/// neighbourhood is left as is.
///
/// With `literal`, member `j` is weighted `1/N_j` and the sum divided by
/// the neighbourhood size (owner count for task columns). Optimizer
/// moments are left alone.
pub fn periodic_average(
    states: &mut [ClientState],
    mix: &MixingMatrix,
    literal: bool,
) -> Result<()> {
    let k = states.len();
    if mix.size() != k {
        return Err(Error::Invariant(format!(
            "mixing matrix is {} for {k} clients",
            mix.size()
        )));
    }
    check_shapes(states)?;
    let snapshot: Vec<ModelParams> = states.iter().map(|s| s.params.clone()).collect();
    let counts: Vec<usize> = states.iter().map(|s| s.num_samples()).collect();
    let task_sets: Vec<Vec<usize>> = states.iter().map(|s| s.task_set.clone()).collect();
    let ids = match snapshot.first() {
        Some(p) => shared_ids(p),
        None => return Ok(()),
    };
    for (i, state) in states.iter_mut().enumerate() {
        let members: Vec<usize> = (0..k).filter(|&j| mix.weights.get(i, j) != 0.0).collect();
        let weight = |j: usize| {
            if literal {
                1.0 / (counts[j] as f64 * members.len() as f64)
            } else {
                mix.weights.get(i, j)
            }
        };
        for &id in &ids {
            let shape = snapshot[i].get(id).map(|m| m.shape()).unwrap_or((0, 0));
            let mut acc = Matrix::zeros(shape.0, shape.1);
            for &j in &members {
                let src = snapshot[j].get(id).ok_or_else(|| {
                    Error::Invariant(format!("client {j} lacks parameter {}", id.0))
                })?;
                acc.axpy(weight(j), src)?;
            }
            state.params.set(id, acc)?;
        }
        let task = average_task_columns(
            &snapshot,
            &task_sets,
            i,
            &members,
            |j, owners| {
                if literal {
                    1.0 / (counts[j] as f64 * owners as f64)
                } else {
                    mix.weights.get(i, j)
                }
            },
            !literal,
        )?;
        state.params.readout.task = task;
    }
    Ok(())
}

fn average_task_columns(
    snapshot: &[ModelParams],
    task_sets: &[Vec<usize>],
    i: usize,
    members: &[usize],
    weight: impl Fn(usize, usize) -> f64,
    renormalize: bool,
) -> Result<Matrix> {
    let own = &snapshot[i];
    let rows = own.readout.task.rows();
    let mut out = Matrix::zeros(rows, own.task_ids.len());
    for (c, &t) in own.task_ids.iter().enumerate() {
        let owners: Vec<(usize, usize)> = members
            .iter()
            .filter(|&&j| task_sets[j].contains(&t))
            .filter_map(|&j| snapshot[j].task_column(t).map(|col| (j, col)))
            .collect();
        if owners.is_empty() {
            for r in 0..rows {
                out.set(r, c, own.readout.task.get(r, c));
            }
            continue;
        }
        let raw: Vec<f64> = owners
            .iter()
            .map(|&(j, _)| weight(j, owners.len()))
            .collect();
        let total: f64 = raw.iter().sum();
        for (&(j, col), w) in owners.iter().zip(&raw) {
            let w = if renormalize { w / total } else { *w };
            let src = &snapshot[j].readout.task;
            for r in 0..rows {
                out.add_at(r, c, w * src.get(r, col));
            }
        }
    }
    Ok(out)
}

/// Uniform averaging through a virtual server: every shared group is
/// replaced by the client mean, every task column by the mean over the
/// clients owning the task.
pub fn server_average(states: &mut [ClientState], literal: bool) -> Result<()> {
    let k = states.len();
    check_shapes(states)?;
    let snapshot: Vec<ModelParams> = states.iter().map(|s| s.params.clone()).collect();
    let counts: Vec<usize> = states.iter().map(|s| s.num_samples()).collect();
    let task_sets: Vec<Vec<usize>> = states.iter().map(|s| s.task_set.clone()).collect();
    let Some(first) = snapshot.first() else {
        return Ok(());
    };
    let ids = shared_ids(first);
    let weight = |j: usize| {
        if literal {
            1.0 / (counts[j] as f64 * k as f64)
        } else {
            1.0 / k as f64
        }
    };
    let mut means = Vec::with_capacity(ids.len());
    for &id in &ids {
        let shape = first.get(id).map(|m| m.shape()).unwrap_or((0, 0));
        let mut acc = Matrix::zeros(shape.0, shape.1);
        for (j, p) in snapshot.iter().enumerate() {
            acc.axpy(
                weight(j),
                p.get(id)
                    .ok_or_else(|| Error::Invariant("missing parameter".into()))?,
            )?;
        }
        means.push(acc);
    }
    let everyone: Vec<usize> = (0..k).collect();
    for (i, state) in states.iter_mut().enumerate() {
        for (&id, m) in ids.iter().zip(&means) {
            state.params.set(id, m.clone())?;
        }
        let task = average_task_columns(
            &snapshot,
            &task_sets,
            i,
            &everyone,
            |j, owners| {
                if literal {
                    1.0 / (counts[j] as f64 * owners as f64)
                } else {
                    1.0
                }
            },
            !literal,
        )?;
        state.params.readout.task = task;
    }
    Ok(())
}

/// Synchronous covariance exchange. Every client combines its own fresh
/// closed-form covariance with its neighbours' covariances as they were
/// before the exchange; afterwards each client holds its neighbours'
/// updated covariances.
pub fn omega_exchange(
    states: &mut [ClientState],
    conn: &ConnectionMatrix,
    cfg: &MtlConfig,
    s_global: usize,
) -> Result<()> {
    let k = states.len();
    if conn.size() != k {
        return Err(Error::Topology(format!(
            "connection matrix is {} for {k} clients",
            conn.size()
        )));
    }
    let before: Vec<TaskCovariance> = states
        .iter()
        .map(|s| {
            s.omega
                .clone()
                .ok_or_else(|| Error::Invariant(format!("client {} has no task covariance", s.id)))
        })
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = states.iter().map(|s| s.num_samples()).collect();
    let mut updated = Vec::with_capacity(k);
    for (i, s) in states.iter().enumerate() {
        let hood = conn.neighborhood(i);
        let own = hood.iter().position(|&j| j == i).ok_or_else(|| {
            Error::Topology(format!("client {i} missing from its own neighbourhood"))
        })?;
        let members: Vec<WeightedCovariance<'_>> =
            hood.iter().map(|&j| (&before[j], counts[j])).collect();
        updated.push(mtl::omega_decentralized_update(
            own,
            &members,
            &s.params.readout.task,
            &s.params.task_ids,
            s_global,
            cfg,
        )?);
    }
    for (i, s) in states.iter_mut().enumerate() {
        s.neighbor_omegas = conn
            .neighborhood(i)
            .into_iter()
            .filter(|&j| j != i)
            .map(|j| (j, updated[j].clone(), counts[j]))
            .collect();
    }
    for (s, o) in states.iter_mut().zip(updated) {
        s.omega = Some(o);
    }
    Ok(())
}

/// Server-side covariance: the weighted combination of every client's
/// closed-form covariance, broadcast to all clients.
pub fn global_omega(states: &mut [ClientState], cfg: &MtlConfig, s_global: usize) -> Result<()> {
    let fresh: Vec<TaskCovariance> = states
        .iter()
        .map(|s| mtl::omega_closed_form(&s.params.readout.task, &s.params.task_ids))
        .collect::<Result<_>>()?;
    let members: Vec<WeightedCovariance<'_>> = fresh
        .iter()
        .zip(states.iter())
        .map(|(c, s)| (c, s.num_samples()))
        .collect();
    let Some(first) = states.first() else {
        return Ok(());
    };
    let union = first.params.task_ids.clone();
    if states.iter().any(|s| s.params.task_ids != union) {
        return Err(Error::Alignment(
            "server covariance needs every client on the same task set".into(),
        ));
    }
    let merged = mtl::omega_combine(&members, &union, s_global, cfg)?;
    for s in states.iter_mut() {
        s.omega = Some(merged.clone());
        s.neighbor_omegas.clear();
    }
    Ok(())
}

/// `Σ_i ‖W̄ − W_i‖²` over the shared groups.
pub fn consensus_distance(states: &[ClientState]) -> Result<f64> {
    let k = states.len();
    let Some(first) = states.first() else {
        return Ok(0.0);
    };
    check_shapes(states)?;
    let mut total = 0.0;
    for id in shared_ids(&first.params) {
        let shape = first.params.get(id).map(|m| m.shape()).unwrap_or((0, 0));
        let mut mean = Matrix::zeros(shape.0, shape.1);
        for s in states {
            mean.axpy(1.0 / k as f64, s.params.get(id).expect("checked shapes"))?;
        }
        for s in states {
            total += mean
                .sub(s.params.get(id).expect("checked shapes"))?
                .frobenius_sq();
        }
    }
    Ok(total)
}

/// Uniform mean of the shared groups; the task head is taken from `base`.
pub fn averaged_shared(states: &[ClientState], base: &ModelParams) -> Result<ModelParams> {
    let k = states.len() as f64;
    let mut out = base.clone();
    for id in shared_ids(base) {
        let shape = base.get(id).map(|m| m.shape()).unwrap_or((0, 0));
        let mut mean = Matrix::zeros(shape.0, shape.1);
        for s in states {
            mean.axpy(
                1.0 / k,
                s.params.get(id).ok_or_else(|| {
                    Error::Invariant(format!("client {} lacks parameter {}", s.id, id.0))
                })?,
            )?;
        }
        out.set(id, mean)?;
    }
    Ok(out)
}
