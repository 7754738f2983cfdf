use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{build_problem, write_atomic};
use crate::diffmath::{Activation, Tensor};
use crate::distributions::Sampler;
use crate::solver::{fork_aux_samplers, init_state, BarycenterProblem, MapAverage, TrainState};
use crate::{Error, Result};

/// Checkpoint format version; bumped on any layout change.
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkMeta {
    role: String,
    layer_shapes: Vec<(usize, usize)>,
    output_activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngPositions {
    /// Reference-sampler word positions, hex-encoded.
    refs: Vec<String>,
    /// Energy-prior word positions per component; null when the cost has no
    /// prior sampler.
    priors: Vec<Option<String>>,
    /// Auxiliary-noise fork positions per component.
    aux: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_hash: String,
    epoch: u64,
    /// Number of epochs accumulated into the map average; 0 when absent.
    average_count: u64,
    adam_potential_step: u64,
    adam_map_step: u64,
    networks: Vec<NetworkMeta>,
    entries: Vec<EntryMeta>,
    rng: RngPositions,
}

/// A restored training state with the problem and auxiliary samplers
/// positioned exactly where the checkpoint left them.
pub struct LoadedCheckpoint {
    pub state: TrainState,
    pub problem: BarycenterProblem,
    pub aux: Vec<Sampler>,
}

fn hex_u128(v: u128) -> String {
    format!("{v:x}")
}

fn parse_u128(s: &str) -> Result<u128> {
    u128::from_str_radix(s, 16)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad rng position {s:?}: {e}")))
}

fn network_meta(state: &TrainState) -> Vec<NetworkMeta> {
    let mut out = Vec::new();
    for (k, model) in state.models.iter().enumerate() {
        let nets: Vec<(&str, &crate::diffmath::MlpParams)> = match model {
            crate::transport::PlanModel::Deterministic { net }
            | crate::transport::PlanModel::Stochastic { net, .. } => vec![("map", net)],
            crate::transport::PlanModel::Gaussian { mean_net, scale_net } => {
                vec![("map_mean", mean_net), ("map_scale", scale_net)]
            }
        };
        for (role, net) in nets {
            out.push(NetworkMeta {
                role: format!("{role}_{k}"),
                layer_shapes: net.layer_shapes(),
                output_activation: net.output_activation,
            });
        }
    }
    for (k, net) in state.bank.nets.iter().enumerate() {
        out.push(NetworkMeta {
            role: format!("potential_{k}"),
            layer_shapes: net.layer_shapes(),
            output_activation: net.output_activation,
        });
    }
    out
}

/// Parameter tensors in blob order, with their manifest names.
fn blob_tensors(state: &TrainState) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (k, model) in state.models.iter().enumerate() {
        for (i, t) in model.param_tensors().into_iter().enumerate() {
            out.push((format!("model{k}/p{i}"), t));
        }
    }
    if let Some(avg) = &state.map_average {
        for (k, model) in avg.models.iter().enumerate() {
            for (i, t) in model.param_tensors().into_iter().enumerate() {
                out.push((format!("avg_model{k}/p{i}"), t));
            }
        }
    }
    for (i, t) in state.bank.param_tensors().into_iter().enumerate() {
        out.push((format!("potential/p{i}"), t));
    }
    for (i, t) in state.adam_potential.first_moment.iter().enumerate() {
        out.push((format!("adam_f/m{i}"), t));
    }
    for (i, t) in state.adam_potential.second_moment.iter().enumerate() {
        out.push((format!("adam_f/v{i}"), t));
    }
    for (i, t) in state.adam_map.first_moment.iter().enumerate() {
        out.push((format!("adam_t/m{i}"), t));
    }
    for (i, t) in state.adam_map.second_moment.iter().enumerate() {
        out.push((format!("adam_t/v{i}"), t));
    }
    out
}

/// Saves `<stem>.json` (manifest) and `<stem>.bin` (little-endian 64-bit
/// float blob, concatenated in manifest entry order). Both writes are
/// atomic.
pub fn save_checkpoint(
    state: &TrainState,
    problem: &BarycenterProblem,
    aux: &[Sampler],
    config: &ExperimentConfig,
    stem: &Path,
) -> Result<()> {
    let tensors = blob_tensors(state);
    let entries: Vec<EntryMeta> = tensors
        .iter()
        .map(|(name, t)| EntryMeta { name: name.clone(), shape: t.shape().to_vec() })
        .collect();
    let mut blob = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    for (_, t) in &tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: VERSION,
        config_hash: config.hash(),
        epoch: state.epoch,
        average_count: state.map_average.as_ref().map_or(0, |a| a.count),
        adam_potential_step: state.adam_potential.step,
        adam_map_step: state.adam_map.step,
        networks: network_meta(state),
        entries,
        rng: RngPositions {
            refs: problem.components.iter().map(|c| hex_u128(c.sampler.rng_word_pos())).collect(),
            priors: problem
                .components
                .iter()
                .map(|c| c.cost.prior_sampler().map(|s| hex_u128(s.rng_word_pos())))
                .collect(),
            aux: aux.iter().map(|s| hex_u128(s.rng_word_pos())).collect(),
        },
    };
    write_atomic(
        &stem.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    write_atomic(&stem.with_extension("bin"), &blob)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`], refusing manifests whose
/// config hash does not match `config`. Restores parameters bit-exactly and
/// repositions every RNG stream so resumed training continues the original
/// run.
pub fn load_checkpoint(stem: &Path, config: &ExperimentConfig) -> Result<LoadedCheckpoint> {
    let manifest_text = std::fs::read_to_string(stem.with_extension("json")).map_err(|e| {
        Error::CorruptCheckpoint(format!("cannot read manifest {}: {e}", stem.display()))
    })?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    if manifest.config_hash != config.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint was created under config hash {}, current is {}",
            manifest.config_hash,
            config.hash()
        )));
    }

    let mut problem = build_problem(config)?;
    let train_cfg = config.train_config();
    let mut state = init_state(&problem, &train_cfg)?;
    let mut aux = fork_aux_samplers(&problem);

    if manifest.average_count > 0 {
        state.map_average =
            Some(MapAverage { models: state.models.clone(), count: manifest.average_count });
    }

    let blob = std::fs::read(stem.with_extension("bin")).map_err(|e| {
        Error::CorruptCheckpoint(format!("cannot read blob {}: {e}", stem.display()))
    })?;

    {
        // collect mutable slots in the same order the blob was written
        let mut slots: Vec<&mut Tensor> = Vec::new();
        for model in state.models.iter_mut() {
            slots.extend(model.param_tensors_mut());
        }
        if let Some(avg) = state.map_average.as_mut() {
            for model in avg.models.iter_mut() {
                slots.extend(model.param_tensors_mut());
            }
        }
        slots.extend(state.bank.param_tensors_mut());
        slots.extend(state.adam_potential.first_moment.iter_mut());
        slots.extend(state.adam_potential.second_moment.iter_mut());
        slots.extend(state.adam_map.first_moment.iter_mut());
        slots.extend(state.adam_map.second_moment.iter_mut());

        if slots.len() != manifest.entries.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "manifest lists {} entries, config implies {}",
                manifest.entries.len(),
                slots.len()
            )));
        }
        let expected_len: usize =
            manifest.entries.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        if blob.len() != expected_len {
            return Err(Error::CorruptCheckpoint(format!(
                "blob holds {} bytes, manifest implies {expected_len}",
                blob.len()
            )));
        }
        let mut offset = 0usize;
        for (slot, entry) in slots.into_iter().zip(&manifest.entries) {
            if slot.shape() != entry.shape.as_slice() {
                return Err(Error::CorruptCheckpoint(format!(
                    "entry {} has shape {:?}, config implies {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            for v in slot.data_mut().iter_mut() {
                let bytes: [u8; 8] = blob[offset..offset + 8].try_into().expect("length checked");
                *v = f64::from_le_bytes(bytes);
                offset += 8;
            }
        }
    }

    state.epoch = manifest.epoch;
    state.adam_potential.step = manifest.adam_potential_step;
    state.adam_map.step = manifest.adam_map_step;

    if manifest.rng.refs.len() != problem.components.len()
        || manifest.rng.aux.len() != aux.len()
        || manifest.rng.priors.len() != problem.components.len()
    {
        return Err(Error::CorruptCheckpoint("rng position count mismatch".into()));
    }
    for (comp, pos) in problem.components.iter_mut().zip(&manifest.rng.refs) {
        comp.sampler.set_rng_word_pos(parse_u128(pos)?);
    }
    for (comp, pos) in problem.components.iter_mut().zip(&manifest.rng.priors) {
        match (comp.cost.prior_sampler_mut(), pos) {
            (Some(sampler), Some(pos)) => sampler.set_rng_word_pos(parse_u128(pos)?),
            (None, None) => {}
            _ => return Err(Error::CorruptCheckpoint("prior sampler mismatch".into())),
        }
    }
    for (sampler, pos) in aux.iter_mut().zip(&manifest.rng.aux) {
        sampler.set_rng_word_pos(parse_u128(pos)?);
    }

    Ok(LoadedCheckpoint { state, problem, aux })
}
