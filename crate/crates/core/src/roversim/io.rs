//! JSONL episode files: a header line followed by one line per transition.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use super::{Episode, InputPolicy, RoverConfig, RoverInput, RoverState, Transition};
use crate::error::{Error, Result};
use crate::jsonfmt;
use crate::terramech::{TerrainClass, TerrainParams};

pub const EPISODE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    terrain: TerrainParams,
    terrain_class: TerrainClass,
    config: RoverConfig,
    policy: InputPolicy,
    seed: u64,
    length: usize,
    clamped_steps: usize,
    torque_adjustments: usize,
}

#[derive(Serialize, Deserialize)]
struct Line {
    t: usize,
    x: f64,
    v: f64,
    torque: [f64; 3],
    slip: [f64; 3],
    sinkage: [f64; 3],
    x_next: f64,
    v_next: f64,
}

pub fn write_episode_jsonl<W: Write>(episode: &Episode, mut out: W) -> Result<()> {
    let header = Header {
        kind: "episode".into(),
        version: EPISODE_FORMAT_VERSION,
        terrain: episode.terrain,
        terrain_class: episode.terrain_class,
        config: episode.config,
        policy: episode.policy,
        seed: episode.seed,
        length: episode.len(),
        clamped_steps: episode.clamped_steps,
        torque_adjustments: episode.torque_adjustments,
    };
    writeln!(out, "{}", jsonfmt::to_string(&header)?)?;
    for (t, tr) in episode.transitions.iter().enumerate() {
        let line = Line {
            t,
            x: tr.state.x,
            v: tr.state.v,
            torque: tr.input.torque,
            slip: tr.input.slip,
            sinkage: tr.input.sinkage,
            x_next: tr.next.x,
            v_next: tr.next.v,
        };
        writeln!(out, "{}", jsonfmt::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_episode_jsonl<R: BufRead>(input: R) -> Result<Episode> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format("empty episode file".into()))??;
    let header: Header = serde_json::from_str(&first)?;
    if header.kind != "episode" || header.version != EPISODE_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported episode header kind={} version={}",
            header.kind, header.version
        )));
    }
    let mut transitions = Vec::with_capacity(header.length);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        if l.t != transitions.len() {
            return Err(Error::Format(format!("transition index {} out of order", l.t)));
        }
        transitions.push(Transition {
            state: RoverState { x: l.x, v: l.v },
            input: RoverInput { torque: l.torque, slip: l.slip, sinkage: l.sinkage },
            next: RoverState { x: l.x_next, v: l.v_next },
        });
    }
    if transitions.len() != header.length {
        return Err(Error::Format(format!(
            "header announces {} transitions, found {}",
            header.length,
            transitions.len()
        )));
    }
    Ok(Episode {
        terrain: header.terrain,
        terrain_class: header.terrain_class,
        config: header.config,
        policy: header.policy,
        seed: header.seed,
        transitions,
        clamped_steps: header.clamped_steps,
        torque_adjustments: header.torque_adjustments,
    })
}
