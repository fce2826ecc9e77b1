//! Trajectory storage, optimal checkpoint scheduling, and transparent
//! restore-or-recompute step provision for reverse sweeps.
//!
//! The planner minimizes forward-step recomputations for a fixed step count
//! and checkpoint capacity. Two checkpoint unit types exist: solution-only
//! units hold one state and require one forward replay before the step can
//! be adjoined; solution+stages units hold the full step record and adjoin
//! for free. Working-memory stages of the step just computed are always
//! usable once, so the step ending a forward sweep never needs a replay.
//!
//! All replay arithmetic is deterministic, so gradients computed through any
//! schedule are bitwise identical to the full-storage gradient.

use crate::forward::{
    forward_step, quadrature_increment, StageData, StageRecord, StepError, StepperConfig,
    Trajectory,
};
use crate::problem::{DAEProblem, Objective, Vector};
use crate::tlm::tlm_step;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("at least one checkpoint slot is required")]
    ZeroCapacity,
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("reverse sweep must request steps in strictly decreasing order: expected {expected}, got {got}")]
    OutOfOrderRequest { expected: usize, got: usize },
    #[error("checkpoint schedule corrupt: {0}")]
    ScheduleCorrupt(String),
    #[error("no checkpoint stored for step {0}")]
    MissingUnit(usize),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint file format: {0}")]
    Format(String),
}

/// What a stored checkpoint unit contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckpointMode {
    /// One solution state per unit; adjoining step n first replays it.
    SolutionOnly,
    /// Solution plus the stage values of the step starting there; the step
    /// adjoins with zero recomputation.
    SolutionWithStages,
}

impl CheckpointMode {
    pub fn label(&self) -> &'static str {
        match self {
            CheckpointMode::SolutionOnly => "sol",
            CheckpointMode::SolutionWithStages => "sol+stages",
        }
    }
}

/// One action of a checkpointing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// Store a checkpoint at node/step `i`.
    Store(usize),
    /// Execute forward steps `from..to` (node indices).
    Advance { from: usize, to: usize },
    /// Read the checkpoint for `i` (leaves it stored; a later `Discard`
    /// frees it).
    Restore(usize),
    /// Serve the adjoint of step `i` from the data now in working memory.
    AdjoinStep(usize),
    /// Drop the checkpoint for `i`.
    Discard(usize),
}

/// Action sequence minimizing recomputations for `(num_steps, capacity, mode)`.
#[derive(Debug, Clone)]
pub struct CheckpointSchedule {
    pub num_steps: usize,
    pub capacity: usize,
    pub mode: CheckpointMode,
    pub actions: Vec<Action>,
    /// Predicted number of recomputed forward steps over the whole sweep.
    pub recomputations: usize,
}

/// Total forward steps executed by the action list, minus the baseline `N`
/// of the initial pass.
pub fn count_recomputations(schedule: &CheckpointSchedule) -> usize {
    let advanced: usize = schedule
        .actions
        .iter()
        .map(|a| match a {
            Action::Advance { from, to } => to - from,
            _ => 0,
        })
        .sum();
    advanced - schedule.num_steps
}

struct Planner {
    capacity_free: usize,
    memo: HashMap<(usize, usize), u64>,
    mode: CheckpointMode,
}

impl Planner {
    /// Minimal total forward executions to adjoin `m` steps with the segment
    /// base stored and `c` free slots. Solution-only counting: every adjoint
    /// step rides on the advance that just executed it.
    fn cost(&mut self, m: usize, c: usize) -> u64 {
        match self.mode {
            CheckpointMode::SolutionOnly => self.cost_solution(m, c),
            CheckpointMode::SolutionWithStages => self.cost_stages(m, c),
        }
    }

    fn cost_solution(&mut self, m: usize, c: usize) -> u64 {
        if m == 0 {
            return 0;
        }
        if m == 1 {
            return 1;
        }
        if let Some(&v) = self.memo.get(&(m, c)) {
            return v;
        }
        // advance to the top, adjoin it from working memory
        let mut best = m as u64 + self.cost_solution(m - 1, c);
        if c > 0 {
            for k in 1..m {
                let v = k as u64 + self.cost_solution(m - k, c - 1) + self.cost_solution(k, c);
                if v < best {
                    best = v;
                }
            }
        }
        self.memo.insert((m, c), best);
        best
    }

    fn cost_stages(&mut self, m: usize, c: usize) -> u64 {
        if m <= 1 {
            return 0;
        }
        if let Some(&v) = self.memo.get(&(m, c)) {
            return v;
        }
        let mut best = (m - 1) as u64 + self.cost_stages(m - 1, c);
        if c > 0 {
            for k in 1..m {
                let v = k as u64 + self.cost_stages(m - k, c - 1) + self.cost_stages(k, c);
                if v < best {
                    best = v;
                }
            }
        }
        self.memo.insert((m, c), best);
        best
    }

    fn emit_solution(&mut self, b: usize, m: usize, c: usize, out: &mut Vec<Action>) {
        if m == 0 {
            return;
        }
        if m == 1 {
            out.push(Action::Restore(b));
            out.push(Action::Advance { from: b, to: b + 1 });
            out.push(Action::AdjoinStep(b));
            out.push(Action::Discard(b));
            return;
        }
        let mut best = m as u64 + self.cost_solution(m - 1, c);
        let mut split = None;
        if c > 0 {
            for k in 1..m {
                let v = k as u64 + self.cost_solution(m - k, c - 1) + self.cost_solution(k, c);
                if v < best {
                    best = v;
                    split = Some(k);
                }
            }
        }
        match split {
            None => {
                out.push(Action::Restore(b));
                out.push(Action::Advance { from: b, to: b + m });
                out.push(Action::AdjoinStep(b + m - 1));
                self.emit_solution(b, m - 1, c, out);
            }
            Some(k) => {
                out.push(Action::Restore(b));
                out.push(Action::Advance { from: b, to: b + k });
                out.push(Action::Store(b + k));
                self.emit_solution(b + k, m - k, c - 1, out);
                self.emit_solution(b, k, c, out);
            }
        }
    }

    fn emit_stages(&mut self, b: usize, m: usize, c: usize, out: &mut Vec<Action>) {
        if m == 0 {
            return;
        }
        if m == 1 {
            out.push(Action::Restore(b));
            out.push(Action::AdjoinStep(b));
            out.push(Action::Discard(b));
            return;
        }
        let mut best = (m - 1) as u64 + self.cost_stages(m - 1, c);
        let mut split = None;
        if c > 0 {
            for k in 1..m {
                let v = k as u64 + self.cost_stages(m - k, c - 1) + self.cost_stages(k, c);
                if v < best {
                    best = v;
                    split = Some(k);
                }
            }
        }
        match split {
            None => {
                out.push(Action::Restore(b));
                out.push(Action::Advance {
                    from: b + 1,
                    to: b + m,
                });
                out.push(Action::AdjoinStep(b + m - 1));
                self.emit_stages(b, m - 1, c, out);
            }
            Some(k) => {
                out.push(Action::Restore(b));
                out.push(Action::Advance {
                    from: b + 1,
                    to: b + k + 1,
                });
                out.push(Action::Store(b + k));
                self.emit_stages(b + k, m - k, c - 1, out);
                self.emit_stages(b, k, c, out);
            }
        }
    }
}

/// Plan an optimal schedule for adjoining `num_steps` steps with `capacity`
/// checkpoint slots of the given unit type.
pub fn plan_schedule(
    num_steps: usize,
    capacity: usize,
    mode: CheckpointMode,
) -> Result<CheckpointSchedule, CheckpointError> {
    if capacity == 0 {
        return Err(CheckpointError::ZeroCapacity);
    }
    if num_steps == 0 {
        return Err(CheckpointError::ZeroSteps);
    }
    let mut planner = Planner {
        capacity_free: capacity - 1,
        memo: HashMap::new(),
        mode,
    };
    let free = planner.capacity_free;
    let mut actions = Vec::new();
    let total_advances = match mode {
        CheckpointMode::SolutionOnly => {
            actions.push(Action::Store(0));
            let cost = planner.cost(num_steps, free);
            planner.emit_solution(0, num_steps, free, &mut actions);
            cost
        }
        CheckpointMode::SolutionWithStages => {
            actions.push(Action::Advance { from: 0, to: 1 });
            actions.push(Action::Store(0));
            let cost = 1 + planner.cost(num_steps, free);
            planner.emit_stages(0, num_steps, free, &mut actions);
            cost
        }
    };
    let schedule = CheckpointSchedule {
        num_steps,
        capacity,
        mode,
        actions,
        recomputations: (total_advances as usize) - num_steps,
    };
    debug_assert_eq!(schedule.recomputations, count_recomputations(&schedule));
    Ok(schedule)
}

/// Simulate the action list symbolically and check every schedule invariant:
/// adjoins run `N-1..0` exactly once, live checkpoints never exceed capacity,
/// restores hit the top of the stack, and every adjoin has its data
/// available (a fresh advance ending at the step, or a restored full unit).
pub fn validate_schedule(schedule: &CheckpointSchedule) -> Result<(), String> {
    let n = schedule.num_steps;
    let mut stack: Vec<usize> = Vec::new();
    let mut pos: Option<usize> = Some(0); // current node of the cursor state
    let mut working: Option<usize> = None; // step whose record is in memory
    let mut restored_full: Option<usize> = None;
    let mut next_adjoin = n as i64 - 1;
    let stages_mode = schedule.mode == CheckpointMode::SolutionWithStages;

    for (idx, action) in schedule.actions.iter().enumerate() {
        match *action {
            Action::Store(i) => {
                if stages_mode {
                    if working != Some(i) {
                        return Err(format!(
                            "action {idx}: Store({i}) without record of step {i}"
                        ));
                    }
                } else if pos != Some(i) {
                    return Err(format!(
                        "action {idx}: Store({i}) while positioned elsewhere"
                    ));
                }
                if stack.contains(&i) {
                    return Err(format!(
                        "action {idx}: Store({i}) duplicates a live checkpoint"
                    ));
                }
                stack.push(i);
                if stack.len() > schedule.capacity {
                    return Err(format!(
                        "action {idx}: live checkpoints {} exceed capacity {}",
                        stack.len(),
                        schedule.capacity
                    ));
                }
            }
            Action::Restore(i) => {
                match stack.last() {
                    Some(&top) if top == i => {}
                    _ => return Err(format!("action {idx}: Restore({i}) is not the stack top")),
                }
                pos = Some(i);
                if stages_mode {
                    working = Some(i);
                    restored_full = Some(i);
                } else {
                    working = None;
                    restored_full = None;
                }
            }
            Action::Advance { from, to } => {
                if to <= from || to > n {
                    return Err(format!("action {idx}: bad advance {from}->{to}"));
                }
                let ok = pos == Some(from) || (stages_mode && working.map(|s| s + 1) == Some(from));
                if !ok {
                    return Err(format!(
                        "action {idx}: Advance from {from} but cursor at {pos:?}"
                    ));
                }
                pos = Some(to);
                working = Some(to - 1);
                restored_full = None;
            }
            Action::AdjoinStep(i) => {
                if next_adjoin != i as i64 {
                    return Err(format!(
                        "action {idx}: AdjoinStep({i}) out of order, expected {next_adjoin}"
                    ));
                }
                let available = working == Some(i) || restored_full == Some(i);
                if !available {
                    return Err(format!("action {idx}: AdjoinStep({i}) without its data"));
                }
                next_adjoin -= 1;
            }
            Action::Discard(i) => match stack.pop() {
                Some(top) if top == i => {}
                _ => return Err(format!("action {idx}: Discard({i}) is not the stack top")),
            },
        }
    }
    if next_adjoin != -1 {
        return Err(format!(
            "schedule ended before adjoining step {next_adjoin}"
        ));
    }
    Ok(())
}

/// A stored checkpoint: the solution at a step, optionally the directional
/// sensitivity there, optionally the full stage record of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointUnit {
    pub step: usize,
    pub state: Vector,
    pub w: Option<Vector>,
    pub stages: Option<StageRecord>,
}

pub trait CheckpointStore {
    fn put(&mut self, unit: CheckpointUnit) -> Result<(), CheckpointError>;
    fn get(&self, step: usize) -> Result<CheckpointUnit, CheckpointError>;
    fn remove(&mut self, step: usize) -> Result<(), CheckpointError>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory stack of checkpoint units.
#[derive(Default)]
pub struct MemoryStore {
    units: Vec<CheckpointUnit>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl CheckpointStore for MemoryStore {
    fn put(&mut self, unit: CheckpointUnit) -> Result<(), CheckpointError> {
        self.units.push(unit);
        Ok(())
    }

    fn get(&self, step: usize) -> Result<CheckpointUnit, CheckpointError> {
        self.units
            .iter()
            .rev()
            .find(|u| u.step == step)
            .cloned()
            .ok_or(CheckpointError::MissingUnit(step))
    }

    fn remove(&mut self, step: usize) -> Result<(), CheckpointError> {
        match self.units.iter().rposition(|u| u.step == step) {
            Some(i) => {
                self.units.remove(i);
                Ok(())
            }
            None => Err(CheckpointError::MissingUnit(step)),
        }
    }

    fn len(&self) -> usize {
        self.units.len()
    }
}

/// Binary file store, one file per checkpoint unit.
pub struct DiskStore {
    dir: PathBuf,
    live: Vec<usize>,
}

impl DiskStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, CheckpointError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            live: Vec::new(),
        })
    }

    fn path(&self, step: usize) -> PathBuf {
        self.dir.join(format!("unit_{step:08}.bin"))
    }
}

impl CheckpointStore for DiskStore {
    fn put(&mut self, unit: CheckpointUnit) -> Result<(), CheckpointError> {
        let mut file = std::fs::File::create(self.path(unit.step))?;
        write_unit(&mut file, &unit)?;
        self.live.push(unit.step);
        Ok(())
    }

    fn get(&self, step: usize) -> Result<CheckpointUnit, CheckpointError> {
        if !self.live.contains(&step) {
            return Err(CheckpointError::MissingUnit(step));
        }
        let mut file = std::fs::File::open(self.path(step))?;
        read_unit(&mut file)
    }

    fn remove(&mut self, step: usize) -> Result<(), CheckpointError> {
        match self.live.iter().rposition(|&s| s == step) {
            Some(i) => {
                self.live.remove(i);
                let _ = std::fs::remove_file(self.path(step));
                Ok(())
            }
            None => Err(CheckpointError::MissingUnit(step)),
        }
    }

    fn len(&self) -> usize {
        self.live.len()
    }
}

impl Drop for DiskStore {
    fn drop(&mut self) {
        for &s in &self.live {
            let _ = std::fs::remove_file(self.path(s));
        }
    }
}

const UNIT_MAGIC: &[u8; 8] = b"ADJTSCKP";
const UNIT_VERSION: u32 = 1;

fn write_vec(w: &mut impl Write, v: &Vector) -> std::io::Result<()> {
    w.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_vec(r: &mut impl Read) -> Result<Vector, CheckpointError> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let len = u64::from_le_bytes(len8) as usize;
    let mut out = Vector::zeros(len);
    let mut buf = [0u8; 8];
    for i in 0..len {
        r.read_exact(&mut buf)?;
        out[i] = f64::from_le_bytes(buf);
    }
    Ok(out)
}

fn write_f64(w: &mut impl Write, x: f64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Serialize a checkpoint unit: header (magic, version, step index, state
/// dimension, stage tag) then contiguous little-endian doubles.
pub fn write_unit(w: &mut impl Write, unit: &CheckpointUnit) -> Result<(), CheckpointError> {
    w.write_all(UNIT_MAGIC)?;
    w.write_all(&UNIT_VERSION.to_le_bytes())?;
    w.write_all(&(unit.step as u64).to_le_bytes())?;
    w.write_all(&(unit.state.len() as u64).to_le_bytes())?;
    let stage_tag: u8 = match &unit.stages {
        None => 0,
        Some(rec) => match rec.data {
            StageData::Theta { .. } => 1,
            StageData::Rk4 { .. } => 2,
        },
    };
    w.write_all(&[stage_tag, u8::from(unit.w.is_some())])?;
    write_vec(w, &unit.state)?;
    if let Some(wv) = &unit.w {
        write_vec(w, wv)?;
    }
    if let Some(rec) = &unit.stages {
        w.write_all(&(rec.step as u64).to_le_bytes())?;
        write_f64(w, rec.t)?;
        write_f64(w, rec.h)?;
        write_vec(w, &rec.u_n)?;
        write_vec(w, &rec.u_np1)?;
        match &rec.data {
            StageData::Theta { theta, f_n, f_np1 } => {
                write_f64(w, *theta)?;
                write_vec(w, f_n)?;
                write_vec(w, f_np1)?;
            }
            StageData::Rk4 { stages, k } => {
                for v in stages.iter().chain(k.iter()) {
                    write_vec(w, v)?;
                }
            }
        }
    }
    Ok(())
}

/// Read back a unit written by [`write_unit`]; bitwise faithful.
pub fn read_unit(r: &mut impl Read) -> Result<CheckpointUnit, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != UNIT_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    if u32::from_le_bytes(v4) != UNIT_VERSION {
        return Err(CheckpointError::Format("unsupported version".into()));
    }
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let step = u64::from_le_bytes(v8) as usize;
    r.read_exact(&mut v8)?; // state dimension, implied by the vectors
    let mut flags = [0u8; 2];
    r.read_exact(&mut flags)?;
    let state = read_vec(r)?;
    let w = if flags[1] == 1 {
        Some(read_vec(r)?)
    } else {
        None
    };
    let stages = match flags[0] {
        0 => None,
        tag => {
            r.read_exact(&mut v8)?;
            let rec_step = u64::from_le_bytes(v8) as usize;
            let t = read_f64(r)?;
            let h = read_f64(r)?;
            let u_n = read_vec(r)?;
            let u_np1 = read_vec(r)?;
            let data = match tag {
                1 => {
                    let theta = read_f64(r)?;
                    let f_n = read_vec(r)?;
                    let f_np1 = read_vec(r)?;
                    StageData::Theta { theta, f_n, f_np1 }
                }
                2 => {
                    let mut vs = Vec::with_capacity(8);
                    for _ in 0..8 {
                        vs.push(read_vec(r)?);
                    }
                    let k = [
                        vs.pop().unwrap(),
                        vs.pop().unwrap(),
                        vs.pop().unwrap(),
                        vs.pop().unwrap(),
                    ];
                    let stages_arr = [
                        vs.pop().unwrap(),
                        vs.pop().unwrap(),
                        vs.pop().unwrap(),
                        vs.pop().unwrap(),
                    ];
                    let stages_arr = {
                        let [a, b, c, d] = stages_arr;
                        [d, c, b, a]
                    };
                    let k = {
                        let [a, b, c, d] = k;
                        [d, c, b, a]
                    };
                    StageData::Rk4 {
                        stages: stages_arr,
                        k,
                    }
                }
                _ => return Err(CheckpointError::Format("unknown stage tag".into())),
            };
            Some(StageRecord {
                step: rec_step,
                t,
                h,
                u_n,
                u_np1,
                data,
            })
        }
    };
    Ok(CheckpointUnit {
        step,
        state,
        w,
        stages,
    })
}

/// Serialize-then-deserialize a unit through an in-memory buffer.
pub fn unit_roundtrip(unit: &CheckpointUnit) -> Result<CheckpointUnit, CheckpointError> {
    let mut buf = Vec::new();
    write_unit(&mut buf, unit)?;
    read_unit(&mut std::io::Cursor::new(buf))
}

/// The data a reverse sweep consumes for one step.
#[derive(Debug, Clone)]
pub struct StepUnit {
    pub record: StageRecord,
    /// Directional sensitivity at the start of the step, when tracked.
    pub w: Option<Vector>,
}

/// Reverse-sweep access to a forward trajectory, either fully stored or
/// served through a checkpointing provider.
pub trait StepAccess {
    fn num_steps(&self) -> usize;
    fn final_state(&self) -> &Vector;
    fn final_w(&self) -> Option<&Vector> {
        None
    }
    fn fetch(&mut self, step: usize) -> Result<StepUnit, CheckpointError>;
    fn recomputations(&self) -> usize {
        0
    }
}

impl StepAccess for Trajectory {
    fn num_steps(&self) -> usize {
        self.records.len()
    }

    fn final_state(&self) -> &Vector {
        Trajectory::final_state(self)
    }

    fn fetch(&mut self, step: usize) -> Result<StepUnit, CheckpointError> {
        Ok(StepUnit {
            record: self.records[step].clone(),
            w: None,
        })
    }
}

/// Full-storage trajectory paired with a directional sensitivity history.
pub struct TrajectoryWithSensitivity<'a> {
    pub trajectory: &'a Trajectory,
    pub w: &'a [Vector],
}

impl StepAccess for TrajectoryWithSensitivity<'_> {
    fn num_steps(&self) -> usize {
        self.trajectory.records.len()
    }

    fn final_state(&self) -> &Vector {
        self.trajectory.final_state()
    }

    fn final_w(&self) -> Option<&Vector> {
        self.w.last()
    }

    fn fetch(&mut self, step: usize) -> Result<StepUnit, CheckpointError> {
        Ok(StepUnit {
            record: self.trajectory.records[step].clone(),
            w: Some(self.w[step].clone()),
        })
    }
}

/// Re-executes forward (and optionally tangent-linear) steps during replays.
pub trait Replayer {
    fn replay(
        &mut self,
        step: usize,
        u_n: &Vector,
        w_n: Option<&Vector>,
    ) -> Result<(StageRecord, Option<Vector>), CheckpointError>;

    /// Recompute `w_{n+1}` from a stored record (stage-mode restores).
    fn propagate_w(
        &mut self,
        record: &StageRecord,
        w_n: &Vector,
    ) -> Result<Vector, CheckpointError>;
}

/// Plain forward replayer; accumulates the integral cost over the initial
/// pass (each step's quadrature is added exactly once, in step order).
pub struct ForwardReplayer<'a> {
    pub problem: &'a DAEProblem,
    pub objective: &'a Objective,
    pub config: &'a StepperConfig,
    pub p: &'a Vector,
    q_total: f64,
    quad_cursor: usize,
}

impl<'a> ForwardReplayer<'a> {
    pub fn new(
        problem: &'a DAEProblem,
        objective: &'a Objective,
        config: &'a StepperConfig,
        p: &'a Vector,
    ) -> Self {
        Self {
            problem,
            objective,
            config,
            p,
            q_total: 0.0,
            quad_cursor: 0,
        }
    }

    pub fn accumulated_q(&self) -> f64 {
        self.q_total
    }
}

impl Replayer for ForwardReplayer<'_> {
    fn replay(
        &mut self,
        step: usize,
        u_n: &Vector,
        _w_n: Option<&Vector>,
    ) -> Result<(StageRecord, Option<Vector>), CheckpointError> {
        let record = forward_step(self.problem, self.config, step, u_n, self.p)?;
        if step == self.quad_cursor {
            self.q_total += quadrature_increment(self.objective, &record, self.p);
            self.quad_cursor += 1;
        }
        Ok((record, None))
    }

    fn propagate_w(
        &mut self,
        _record: &StageRecord,
        _w_n: &Vector,
    ) -> Result<Vector, CheckpointError> {
        Err(CheckpointError::ScheduleCorrupt(
            "forward replayer tracks no sensitivity".into(),
        ))
    }
}

/// Forward plus directional TLM replayer for second-order sweeps.
pub struct TlmReplayer<'a> {
    pub inner: ForwardReplayer<'a>,
    pub v2: Option<&'a Vector>,
}

impl Replayer for TlmReplayer<'_> {
    fn replay(
        &mut self,
        step: usize,
        u_n: &Vector,
        w_n: Option<&Vector>,
    ) -> Result<(StageRecord, Option<Vector>), CheckpointError> {
        let (record, _) = self.inner.replay(step, u_n, None)?;
        let w_n = w_n.ok_or_else(|| {
            CheckpointError::ScheduleCorrupt("tlm replayer needs a sensitivity state".into())
        })?;
        let w_next = tlm_step(
            self.inner.problem,
            &record,
            w_n,
            self.v2,
            self.inner.p,
            &self.inner.config.linear,
        )?;
        Ok((record, Some(w_next)))
    }

    fn propagate_w(
        &mut self,
        record: &StageRecord,
        w_n: &Vector,
    ) -> Result<Vector, CheckpointError> {
        Ok(tlm_step(
            self.inner.problem,
            record,
            w_n,
            self.v2,
            self.inner.p,
            &self.inner.config.linear,
        )?)
    }
}

/// Serves a reverse sweep step by step, restoring checkpoints or replaying
/// forward segments exactly as the schedule dictates.
pub struct StepProvider<R: Replayer> {
    schedule: CheckpointSchedule,
    store: Box<dyn CheckpointStore>,
    replayer: R,
    cursor: usize,
    pos: usize,
    state: Vector,
    w: Option<Vector>,
    /// Last executed or restored step record plus the sensitivity at its start.
    working: Option<(StageRecord, Option<Vector>)>,
    total_advanced: usize,
    next_request: i64,
    final_state: Option<Vector>,
    final_w: Option<Vector>,
}

impl<R: Replayer> StepProvider<R> {
    /// Run the forward pass dictated by the schedule, stopping at the first
    /// adjoint request point. On return the final state (and cost inside the
    /// replayer) are available.
    pub fn start(
        replayer: R,
        schedule: CheckpointSchedule,
        store: Box<dyn CheckpointStore>,
        u0: Vector,
        w0: Option<Vector>,
    ) -> Result<Self, CheckpointError> {
        let n = schedule.num_steps;
        let mut provider = Self {
            schedule,
            store,
            replayer,
            cursor: 0,
            pos: 0,
            state: u0,
            w: w0,
            working: None,
            total_advanced: 0,
            next_request: n as i64 - 1,
            final_state: None,
            final_w: None,
        };
        provider.exec_until_adjoin()?;
        if provider.final_state.is_none() {
            return Err(CheckpointError::ScheduleCorrupt(
                "forward pass never reached the final state".into(),
            ));
        }
        Ok(provider)
    }

    pub fn replayer(&self) -> &R {
        &self.replayer
    }

    pub fn schedule(&self) -> &CheckpointSchedule {
        &self.schedule
    }

    /// Forward steps executed beyond the baseline pass so far.
    pub fn recomputed_steps(&self) -> usize {
        self.total_advanced.saturating_sub(self.schedule.num_steps)
    }

    fn exec_until_adjoin(&mut self) -> Result<(), CheckpointError> {
        while self.cursor < self.schedule.actions.len() {
            match self.schedule.actions[self.cursor] {
                Action::AdjoinStep(_) => return Ok(()),
                Action::Store(i) => {
                    let unit = match self.schedule.mode {
                        CheckpointMode::SolutionWithStages => {
                            let (record, w_start) = self.working.as_ref().ok_or_else(|| {
                                CheckpointError::ScheduleCorrupt(format!(
                                    "Store({i}) with no working record"
                                ))
                            })?;
                            if record.step != i {
                                return Err(CheckpointError::ScheduleCorrupt(format!(
                                    "Store({i}) but working record is step {}",
                                    record.step
                                )));
                            }
                            CheckpointUnit {
                                step: i,
                                state: record.u_n.clone(),
                                w: w_start.clone(),
                                stages: Some(record.clone()),
                            }
                        }
                        CheckpointMode::SolutionOnly => {
                            if self.pos != i {
                                return Err(CheckpointError::ScheduleCorrupt(format!(
                                    "Store({i}) while positioned at {}",
                                    self.pos
                                )));
                            }
                            CheckpointUnit {
                                step: i,
                                state: self.state.clone(),
                                w: self.w.clone(),
                                stages: None,
                            }
                        }
                    };
                    self.store.put(unit)?;
                }
                Action::Restore(i) => {
                    let unit = self.store.get(i)?;
                    self.pos = i;
                    self.state = unit.state;
                    self.w = unit.w.clone();
                    self.working = unit.stages.map(|rec| (rec, unit.w));
                }
                Action::Advance { from, to } => {
                    if self.pos != from {
                        // a restored full unit also provides the state one
                        // node above its own step
                        let usable = self
                            .working
                            .as_ref()
                            .filter(|(rec, _)| rec.step + 1 == from)
                            .cloned();
                        match usable {
                            Some((rec, w_start)) => {
                                self.state = rec.u_np1.clone();
                                self.w = match (&w_start, &self.w) {
                                    (Some(ws), _) => Some(self.replayer.propagate_w(&rec, ws)?),
                                    (None, _) => None,
                                };
                                self.pos = from;
                            }
                            None => {
                                return Err(CheckpointError::ScheduleCorrupt(format!(
                                    "Advance from {from} but cursor at {}",
                                    self.pos
                                )))
                            }
                        }
                    }
                    for step in from..to {
                        let w_start = self.w.clone();
                        let (record, w_end) =
                            self.replayer.replay(step, &self.state, w_start.as_ref())?;
                        self.state = record.u_np1.clone();
                        self.w = w_end;
                        self.pos = step + 1;
                        self.working = Some((record, w_start));
                        self.total_advanced += 1;
                        if self.pos == self.schedule.num_steps && self.final_state.is_none() {
                            self.final_state = Some(self.state.clone());
                            self.final_w = self.w.clone();
                        }
                    }
                }
                Action::Discard(i) => {
                    self.store.remove(i)?;
                }
            }
            self.cursor += 1;
        }
        Ok(())
    }
}

impl<R: Replayer> StepAccess for StepProvider<R> {
    fn num_steps(&self) -> usize {
        self.schedule.num_steps
    }

    fn final_state(&self) -> &Vector {
        self.final_state.as_ref().expect("provider not started")
    }

    fn final_w(&self) -> Option<&Vector> {
        self.final_w.as_ref()
    }

    fn fetch(&mut self, step: usize) -> Result<StepUnit, CheckpointError> {
        if self.next_request != step as i64 {
            return Err(CheckpointError::OutOfOrderRequest {
                expected: self.next_request.max(0) as usize,
                got: step,
            });
        }
        self.exec_until_adjoin()?;
        match self.schedule.actions.get(self.cursor) {
            Some(Action::AdjoinStep(i)) if *i == step => {}
            other => {
                return Err(CheckpointError::ScheduleCorrupt(format!(
                    "expected AdjoinStep({step}), found {other:?}"
                )))
            }
        }
        let (record, w_start) = self
            .working
            .as_ref()
            .ok_or_else(|| CheckpointError::ScheduleCorrupt(format!("no data for step {step}")))?;
        if record.step != step {
            return Err(CheckpointError::ScheduleCorrupt(format!(
                "working record {} does not match adjoin target {step}",
                record.step
            )));
        }
        let unit = StepUnit {
            record: record.clone(),
            w: w_start.clone(),
        };
        self.cursor += 1;
        self.next_request -= 1;
        Ok(unit)
    }

    fn recomputations(&self) -> usize {
        self.recomputed_steps()
    }
}
