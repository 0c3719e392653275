//! Episode executor: binds a plan to a scene, schedules one skill per
//! keyframe, evaluates completion and termination every tick, and
//! records a fully deterministic trace.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::math::{Vec2, Vec3};
use crate::planner::LongScript;
use crate::scene::{
    compute_heightmap, nearest_surface_point, sample_spawn, Scene, SceneError, SceneObject,
};
use crate::scriptdb::SkillId;
use crate::skills::{
    encode_goal, standing_state, CharacterState, MotionWindow, Observation, Policy,
    PolicyRegistry, Posture, StepInput, StyleRewardProvider,
};
use crate::tasks::{
    combine, doi_reward, getup_reward, hsi_reward, idle_reward, loco_reward, make_doi_goal,
    make_hsi_goal, make_loco_goal, nearer_hand, DynState, EpisodeConfig, GetUpPhase,
    GoalCondition, LocoMode, RewardBreakdown, TaskError,
};

/// Spawn clearance from all object footprints, meters.
pub const SPAWN_CLEARANCE: f64 = 0.4;
/// Recent states kept for the style-reward window.
const STYLE_WINDOW: usize = 10;
/// Pelvis-contact slack that flips a get-up from settling to rising.
const GETUP_CONTACT_SLACK: f64 = 0.15;

#[derive(Debug, Error)]
pub enum FsmError {
    #[error("no policy registered for skill {0}")]
    UnregisteredSkill(SkillId),
    #[error("keyframe {index} ({skill}) has no scene binding")]
    MissingBinding { index: usize, skill: SkillId },
    #[error("scene object {0} not found")]
    UnknownObject(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    HorizonReached,
    Fall,
    ExcessiveContactForce,
    SuccessHold,
    ScriptComplete,
    Infeasible,
}

/// One simulation tick as recorded in the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub char_state: CharacterState,
    pub goal: GoalCondition,
    pub reward: RewardBreakdown,
    /// λ_style · r_style + λ_task · r_task.
    pub combined: f64,
    pub heightmap_hash: String,
}

/// Outcome of one attempted keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeOutcome {
    pub index: usize,
    pub skill: SkillId,
    pub success: bool,
    /// Final contact / position error against the template threshold.
    pub final_error: f64,
    pub ticks_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub seed: u64,
    pub records: Vec<TickRecord>,
    pub outcomes: Vec<KeyframeOutcome>,
    pub termination: TerminationReason,
}

/// Shared read-only episode dependencies.
pub struct EpisodeContext<'a> {
    pub scene: &'a Scene,
    pub cfg: &'a EpisodeConfig,
    pub registry: &'a PolicyRegistry,
    pub embedder: &'a dyn EmbeddingProvider,
    pub style: &'a dyn StyleRewardProvider,
}

/// Mutable episode state. The RNG stream lives here, so everything that
/// happens after `init_episode` is a pure function of this state and the
/// context.
pub struct FsmState {
    pub script: LongScript,
    pub cursor: usize,
    pub char_state: CharacterState,
    pub prev_char_state: CharacterState,
    pub dyn_objects: BTreeMap<String, DynState>,
    pub goal: Option<GoalCondition>,
    /// Consecutive ticks the active condition has held.
    pub hold_ticks: usize,
    /// Ticks spent on the current keyframe.
    pub keyframe_ticks: usize,
    pub tick: usize,
    pub getup_phase: GetUpPhase,
    pub terminated: Option<TerminationReason>,
    /// Style condition for the current keyframe (zero when unconditioned).
    pub z: EmbeddingVector,
    rng: ChaCha12Rng,
    window: Vec<CharacterState>,
    policies: BTreeMap<SkillId, Box<dyn Policy>>,
}

impl FsmState {
    pub fn hold_seconds(&self, cfg: &EpisodeConfig) -> f64 {
        self.hold_ticks as f64 * cfg.dt
    }

    pub fn current_skill(&self) -> Option<SkillId> {
        self.script.keyframes.get(self.cursor).map(|kf| kf.skill)
    }

    fn bound_object<'a>(
        &self,
        scene: &'a Scene,
        index: usize,
    ) -> Result<&'a SceneObject, FsmError> {
        let kf = &self.script.keyframes[index];
        let id = self
            .script
            .scene_binding
            .get(&index)
            .ok_or(FsmError::MissingBinding {
                index,
                skill: kf.skill,
            })?;
        scene
            .object(id)
            .ok_or_else(|| FsmError::UnknownObject(id.clone()))
    }
}

/// Prefer a semantically matching part label, fall back to any part.
fn pick_part_label(object: &SceneObject, skill: SkillId) -> Option<String> {
    let prefer: &[&str] = match skill {
        SkillId::Sit | SkillId::GetUp => &["seat", "surface"],
        SkillId::Lie => &["lie", "seat", "surface"],
        SkillId::Reach => &["grasp", "surface"],
        _ => &["surface"],
    };
    for label in prefer {
        if object.part(label).is_some() {
            return Some((*label).to_string());
        }
    }
    object.parts.keys().next().cloned()
}

/// Standoff point for walking up to an object: just outside its footprint
/// on the side the character approaches from.
fn approach_target(object: &SceneObject, from: Vec2) -> Vec2 {
    let c = object.aabb.centroid().xy();
    let dir = (from - c).normalized().unwrap_or(Vec2::new(1.0, 0.0));
    let half = 0.5 * object.aabb.extent().x.max(object.aabb.extent().y);
    c + dir.scale(half + SPAWN_CLEARANCE)
}

fn goal_for_cursor(fsm: &mut FsmState, ctx: &EpisodeContext<'_>) -> Result<GoalCondition, FsmError> {
    let index = fsm.cursor;
    let kf = fsm.script.keyframes[index].clone();
    let cfg = ctx.cfg;
    match kf.skill {
        SkillId::Walk => {
            if fsm.script.scene_binding.contains_key(&index) {
                let object = fsm.bound_object(ctx.scene, index)?;
                Ok(GoalCondition::Loco {
                    target: approach_target(object, fsm.char_state.root_pos.xy()),
                    target_speed: cfg.walk_speed,
                    mode: LocoMode::Walk,
                })
            } else {
                Ok(make_loco_goal(
                    &fsm.char_state,
                    LocoMode::Walk,
                    ctx.scene.bounds,
                    cfg,
                    &mut fsm.rng,
                )?)
            }
        }
        SkillId::Idle => Ok(make_loco_goal(
            &fsm.char_state,
            LocoMode::Idle,
            ctx.scene.bounds,
            cfg,
            &mut fsm.rng,
        )?),
        SkillId::Sit | SkillId::Lie | SkillId::Reach | SkillId::GetUp => {
            let object = fsm.bound_object(ctx.scene, index)?;
            let part = pick_part_label(object, kf.skill).ok_or_else(|| {
                FsmError::Task(TaskError::UnknownPart {
                    object: object.id.clone(),
                    part: "any".into(),
                })
            })?;
            let joint = match kf.skill {
                SkillId::Reach => crate::skills::JointId::LeftHand,
                _ => crate::skills::JointId::Pelvis,
            };
            let mut goal = make_hsi_goal(
                ctx.scene,
                &object.id,
                &part,
                joint,
                &fsm.char_state,
                cfg,
            )?;
            if kf.skill == SkillId::GetUp {
                if let GoalCondition::Hsi { standing_target, .. } = &mut goal {
                    *standing_target = Some(Vec3::new(
                        fsm.char_state.root_pos.x,
                        fsm.char_state.root_pos.y,
                        cfg.standing_pelvis_height,
                    ));
                }
            }
            Ok(goal)
        }
        SkillId::Carry => {
            let object = fsm.bound_object(ctx.scene, index)?;
            let id = object.id.clone();
            // Carry target: a reachable ground spot away from walls.
            let (lo, hi) = ctx.scene.bounds;
            let margin = 0.5;
            let half_height = object.aabb.extent().z / 2.0;
            let target = Vec3::new(
                fsm.rng.random_range((lo.x + margin)..=(hi.x - margin)),
                fsm.rng.random_range((lo.y + margin)..=(hi.y - margin)),
                half_height,
            );
            Ok(make_doi_goal(ctx.scene, &id, Some(target), cfg, &mut fsm.rng)?)
        }
    }
}

/// Style condition for the current keyframe: the caption embedding for
/// text-conditioned skills, the zero vector otherwise.
fn z_for_cursor(fsm: &FsmState, ctx: &EpisodeContext<'_>) -> Result<EmbeddingVector, FsmError> {
    let kf = &fsm.script.keyframes[fsm.cursor];
    if kf.skill.text_conditioned() {
        if let Some(caption) = &kf.caption {
            return Ok(ctx.embedder.embed(caption)?);
        }
    }
    Ok(EmbeddingVector::zeros(ctx.embedder.dim()))
}

/// Instantaneous success condition and its error metric for the active
/// keyframe. The contact point is re-queried against the part cloud.
fn condition_error(fsm: &FsmState, cfg: &EpisodeConfig) -> Option<(bool, f64)> {
    let skill = fsm.current_skill()?;
    let goal = fsm.goal.as_ref()?;
    let state = &fsm.char_state;
    match (skill, goal) {
        (SkillId::Walk, GoalCondition::Loco { target, .. }) => {
            let err = (*target - state.root_pos.xy()).norm();
            Some((err <= cfg.loco_threshold, err))
        }
        (SkillId::Idle, GoalCondition::Loco { target, .. }) => {
            let err = ((*target - state.root_pos.xy()).norm() - 3.0).max(0.0);
            Some((err == 0.0, err))
        }
        (SkillId::Sit | SkillId::Lie | SkillId::Reach, GoalCondition::Hsi { joint, part, target, .. }) => {
            let joint_pos = state.joint(*joint);
            let err = nearest_surface_point(part, joint_pos)
                .map(|(_, d)| d)
                .unwrap_or((joint_pos - *target).norm());
            let threshold = match skill {
                SkillId::Sit => cfg.sit_threshold,
                SkillId::Lie => cfg.lie_threshold,
                _ => cfg.reach_threshold,
            };
            Some((err <= threshold, err))
        }
        (SkillId::GetUp, GoalCondition::Hsi { standing_target, target, .. }) => {
            let stand = standing_target.unwrap_or(*target);
            let err = (state.root_pos - stand).norm();
            Some((err <= cfg.getup_threshold, err))
        }
        (SkillId::Carry, GoalCondition::Doi { target, object_id, .. }) => {
            let obj = fsm.dyn_objects.get(object_id)?;
            let err = (obj.pos - *target).norm();
            Some((err <= cfg.carry_threshold, err))
        }
        _ => None,
    }
}

/// Spawn the character, place dynamic objects, and construct the first
/// goal. Spawn infeasibility is not an error: it yields a state already
/// terminated as Infeasible so the caller gets a zero-tick trace.
pub fn init_episode(
    ctx: &EpisodeContext<'_>,
    script: LongScript,
    seed: u64,
) -> Result<FsmState, FsmError> {
    let cfg = ctx.cfg;
    // Fail fast on broken bindings before simulating anything.
    for (index, kf) in script.keyframes.iter().enumerate() {
        if kf.skill.requires_object() {
            let id = script
                .scene_binding
                .get(&index)
                .ok_or(FsmError::MissingBinding {
                    index,
                    skill: kf.skill,
                })?;
            if ctx.scene.object(id).is_none() {
                return Err(FsmError::UnknownObject(id.clone()));
            }
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dyn_objects: BTreeMap<String, DynState> = ctx
        .scene
        .objects
        .iter()
        .filter(|o| o.dynamic)
        .map(|o| {
            (
                o.id.clone(),
                DynState {
                    pos: o.aabb.centroid(),
                    vel: Vec3::ZERO,
                },
            )
        })
        .collect();
    let spawn = sample_spawn(ctx.scene, &mut rng, SPAWN_CLEARANCE);
    let (char_state, terminated) = match spawn {
        Ok((p, yaw)) => (
            standing_state(p, yaw, cfg.standing_pelvis_height),
            None,
        ),
        Err(SceneError::TooCrowded(_)) => {
            let center = {
                let (lo, hi) = ctx.scene.bounds;
                Vec2::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0)
            };
            (
                standing_state(center, 0.0, cfg.standing_pelvis_height),
                Some(TerminationReason::Infeasible),
            )
        }
        Err(e) => return Err(FsmError::Task(TaskError::Scene(e))),
    };
    let mut fsm = FsmState {
        script,
        cursor: 0,
        prev_char_state: char_state.clone(),
        char_state,
        dyn_objects,
        goal: None,
        hold_ticks: 0,
        keyframe_ticks: 0,
        tick: 0,
        getup_phase: GetUpPhase::Seated,
        terminated,
        z: EmbeddingVector::zeros(ctx.embedder.dim()),
        rng,
        window: Vec::new(),
        policies: BTreeMap::new(),
    };
    if fsm.terminated.is_none() && !fsm.script.keyframes.is_empty() {
        fsm.goal = Some(goal_for_cursor(&mut fsm, ctx)?);
        fsm.z = z_for_cursor(&fsm, ctx)?;
    }
    Ok(fsm)
}

/// True when the active condition has held continuously for `hold_time`.
pub fn check_completion(fsm: &FsmState, cfg: &EpisodeConfig) -> bool {
    fsm.hold_ticks >= cfg.hold_ticks()
}

/// Episode-level termination, checked before each tick.
pub fn check_termination(
    fsm: &FsmState,
    cfg: &EpisodeConfig,
    force_proxy: f64,
) -> Option<TerminationReason> {
    if let Some(r) = fsm.terminated {
        return Some(r);
    }
    if fsm.cursor >= fsm.script.keyframes.len() {
        return Some(TerminationReason::ScriptComplete);
    }
    if fsm.char_state.root_pos.z < cfg.fall_height
        && fsm.char_state.posture == Posture::Standing
    {
        return Some(TerminationReason::Fall);
    }
    if force_proxy > cfg.max_contact_force {
        return Some(TerminationReason::ExcessiveContactForce);
    }
    if fsm.cursor + 1 == fsm.script.keyframes.len()
        && fsm.hold_ticks >= cfg.success_hold_ticks()
    {
        return Some(TerminationReason::SuccessHold);
    }
    if fsm.tick >= cfg.horizon {
        return Some(TerminationReason::HorizonReached);
    }
    None
}

pub enum TickEvent {
    KeyframeCompleted(KeyframeOutcome),
}

/// One simulation step: observe, act, advance, score, and advance the
/// cursor on a held completion.
pub fn tick(
    fsm: &mut FsmState,
    ctx: &EpisodeContext<'_>,
) -> Result<(TickRecord, Vec<TickEvent>), FsmError> {
    let cfg = ctx.cfg;
    let skill = fsm
        .current_skill()
        .expect("tick requires an active keyframe");
    let goal = fsm.goal.clone().expect("active keyframe has a goal");

    if !fsm.policies.contains_key(&skill) {
        let policy = ctx
            .registry
            .make(skill)
            .ok_or(FsmError::UnregisteredSkill(skill))?;
        fsm.policies.insert(skill, policy);
    }

    let heightmap = compute_heightmap(
        ctx.scene,
        fsm.char_state.root_pos.xy(),
        fsm.char_state.yaw,
    );
    let obs = Observation {
        proprio: fsm.char_state.clone(),
        heightmap: heightmap.flatten().to_vec(),
        goal: encode_goal(&goal, &fsm.char_state),
        z: fsm.z.clone(),
    };
    let obj_id = match &goal {
        GoalCondition::Doi { object_id, .. } => Some(object_id.clone()),
        _ => None,
    };
    let obj_state = obj_id.as_ref().and_then(|id| fsm.dyn_objects.get(id)).copied();

    let policy = fsm.policies.get_mut(&skill).expect("inserted above");
    let action = policy.act(&obs);
    let out = policy.advance(
        &StepInput {
            state: &fsm.char_state,
            goal: &goal,
            obj: obj_state.as_ref(),
            getup_phase: fsm.getup_phase,
            dt: cfg.dt,
        },
        &action,
    );

    fsm.prev_char_state = std::mem::replace(&mut fsm.char_state, out.state);
    if let (Some(id), Some(new_obj)) = (obj_id, out.obj) {
        fsm.dyn_objects.insert(id, new_obj);
    }
    fsm.tick += 1;
    fsm.keyframe_ticks += 1;
    fsm.window.push(fsm.char_state.clone());
    if fsm.window.len() > STYLE_WINDOW {
        fsm.window.remove(0);
    }

    // Get-up staging: settle into contact first, then rise.
    if skill == SkillId::GetUp && fsm.getup_phase == GetUpPhase::Seated {
        if let GoalCondition::Hsi { part, .. } = &goal {
            let pelvis = fsm.char_state.root_pos;
            let settled = nearest_surface_point(part, pelvis)
                .map(|(_, d)| d <= GETUP_CONTACT_SLACK)
                .unwrap_or(true);
            if settled {
                fsm.getup_phase = GetUpPhase::Rising;
            }
        }
    }

    let reward = task_reward(fsm, skill, &goal);
    let style_r = ctx.style.style_reward(
        &MotionWindow {
            states: &fsm.window,
            skill,
        },
        &fsm.z,
    );
    let combined = combine(style_r, reward.total.clamp(0.0, 1.0), cfg)?;

    let (met, error) = condition_error(fsm, cfg).unwrap_or((false, f64::INFINITY));
    if met {
        fsm.hold_ticks += 1;
    } else {
        fsm.hold_ticks = 0;
    }

    let mut events = Vec::new();
    if check_completion(fsm, cfg) {
        let outcome = KeyframeOutcome {
            index: fsm.cursor,
            skill,
            success: true,
            final_error: error,
            ticks_used: fsm.keyframe_ticks,
        };
        events.push(TickEvent::KeyframeCompleted(outcome));
        fsm.cursor += 1;
        fsm.hold_ticks = 0;
        fsm.keyframe_ticks = 0;
        fsm.getup_phase = GetUpPhase::Seated;
        if fsm.cursor < fsm.script.keyframes.len() {
            fsm.goal = Some(goal_for_cursor(fsm, ctx)?);
            fsm.z = z_for_cursor(fsm, ctx)?;
        } else {
            fsm.goal = None;
        }
    }

    let record = TickRecord {
        tick: fsm.tick,
        char_state: fsm.char_state.clone(),
        goal,
        reward,
        combined,
        heightmap_hash: heightmap.hash(),
    };
    Ok((record, events))
}

fn task_reward(fsm: &FsmState, skill: SkillId, goal: &GoalCondition) -> RewardBreakdown {
    let state = &fsm.char_state;
    let prev = &fsm.prev_char_state;
    match skill {
        SkillId::Walk => loco_reward(state, prev, goal),
        SkillId::Idle => idle_reward(state, prev, goal),
        SkillId::Sit | SkillId::Lie | SkillId::Reach => {
            let joint = match goal {
                GoalCondition::Hsi { joint, .. } => *joint,
                _ => crate::skills::JointId::Pelvis,
            };
            hsi_reward(state, state.joint(joint), goal)
        }
        SkillId::GetUp => getup_reward(state, state.root_pos, goal, fsm.getup_phase),
        SkillId::Carry => {
            let obj = match goal {
                GoalCondition::Doi { object_id, .. } => fsm
                    .dyn_objects
                    .get(object_id)
                    .copied()
                    .unwrap_or(DynState {
                        pos: state.root_pos,
                        vel: Vec3::ZERO,
                    }),
                _ => DynState {
                    pos: state.root_pos,
                    vel: Vec3::ZERO,
                },
            };
            doi_reward(state, nearer_hand(state, obj.pos), &obj, goal)
        }
    }
}

/// Run one full episode to termination.
pub fn run_episode(
    ctx: &EpisodeContext<'_>,
    script: LongScript,
    seed: u64,
) -> Result<ExecutionTrace, FsmError> {
    let mut fsm = init_episode(ctx, script, seed)?;
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    let termination = loop {
        if let Some(reason) = check_termination(&fsm, ctx.cfg, 0.0) {
            // An unfinished keyframe still gets an outcome row.
            if fsm.cursor < fsm.script.keyframes.len() && fsm.keyframe_ticks > 0 {
                let (_, error) =
                    condition_error(&fsm, ctx.cfg).unwrap_or((false, f64::INFINITY));
                outcomes.push(KeyframeOutcome {
                    index: fsm.cursor,
                    skill: fsm.current_skill().expect("cursor in range"),
                    success: false,
                    final_error: error,
                    ticks_used: fsm.keyframe_ticks,
                });
            }
            break reason;
        }
        let (record, events) = tick(&mut fsm, ctx)?;
        records.push(record);
        for event in events {
            let TickEvent::KeyframeCompleted(outcome) = event;
            outcomes.push(outcome);
        }
    };
    Ok(ExecutionTrace {
        seed,
        records,
        outcomes,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TestEmbedder;
    use crate::math::Vec3;
    use crate::planner::LongScript;
    use crate::scene::{box_object, Aabb};
    use crate::scriptdb::{Keyframe, StyleLabel};
    use crate::skills::{kinematic_registry, StubStyleReward};

    fn test_scene() -> Scene {
        let sofa = box_object(
            "sofa_0",
            "sofa",
            false,
            Aabb::new(Vec3::ZERO, Vec3::new(1.6, 0.8, 0.45)),
            Vec3::new(3.0, 3.0, 0.0),
            0.0,
            0.2,
        );
        let crate_box = box_object(
            "crate_0",
            "crate",
            true,
            Aabb::new(Vec3::ZERO, Vec3::new(0.4, 0.4, 0.4)),
            Vec3::new(-3.0, -3.0, 0.0),
            0.0,
            0.2,
        );
        Scene::from_objects(vec![sofa, crate_box])
    }

    fn make_ctx<'a>(
        scene: &'a Scene,
        cfg: &'a EpisodeConfig,
        registry: &'a PolicyRegistry,
        embedder: &'a TestEmbedder,
        style: &'a StubStyleReward,
    ) -> EpisodeContext<'a> {
        EpisodeContext {
            scene,
            cfg,
            registry,
            embedder,
            style,
        }
    }

    fn script_of(keyframes: Vec<Keyframe>, binding: &[(usize, &str)]) -> LongScript {
        LongScript {
            keyframes,
            provenance: Vec::new(),
            scene_binding: binding
                .iter()
                .map(|(i, id)| (*i, id.to_string()))
                .collect(),
            prose: None,
        }
    }

    struct Fixture {
        scene: Scene,
        cfg: EpisodeConfig,
        registry: PolicyRegistry,
        embedder: TestEmbedder,
        style: StubStyleReward,
    }

    impl Fixture {
        fn new() -> Self {
            Fixture {
                scene: test_scene(),
                cfg: EpisodeConfig::default(),
                registry: kinematic_registry(),
                embedder: TestEmbedder::new(64, 0),
                style: StubStyleReward,
            }
        }

        fn ctx(&self) -> EpisodeContext<'_> {
            make_ctx(
                &self.scene,
                &self.cfg,
                &self.registry,
                &self.embedder,
                &self.style,
            )
        }
    }

    #[test]
    fn empty_script_is_script_complete_with_zero_records() {
        let fx = Fixture::new();
        let trace = run_episode(&fx.ctx(), script_of(vec![], &[]), 5).unwrap();
        assert_eq!(trace.termination, TerminationReason::ScriptComplete);
        assert!(trace.records.is_empty());
        assert!(trace.outcomes.is_empty());
    }

    #[test]
    fn missing_binding_fails_at_init() {
        let fx = Fixture::new();
        let script = script_of(vec![Keyframe::new(SkillId::Sit).with_object("sofa")], &[]);
        let Err(err) = init_episode(&fx.ctx(), script, 1) else {
            panic!("init must fail without a binding");
        };
        assert!(matches!(err, FsmError::MissingBinding { index: 0, .. }));
    }

    #[test]
    fn unknown_bound_object_fails_at_init() {
        let fx = Fixture::new();
        let script = script_of(
            vec![Keyframe::new(SkillId::Sit).with_object("sofa")],
            &[(0, "ghost")],
        );
        assert!(matches!(
            init_episode(&fx.ctx(), script, 1),
            Err(FsmError::UnknownObject(_))
        ));
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let fx = Fixture::new();
        let script = || {
            script_of(
                vec![
                    Keyframe::new(SkillId::Walk),
                    Keyframe::new(SkillId::Sit)
                        .with_object("sofa")
                        .with_caption("sit down comfortably", StyleLabel::Relaxed),
                    Keyframe::new(SkillId::GetUp).with_object("sofa"),
                ],
                &[(1, "sofa_0"), (2, "sofa_0")],
            )
        };
        let a = run_episode(&fx.ctx(), script(), 42).unwrap();
        let b = run_episode(&fx.ctx(), script(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn walk_keyframe_completes_with_expected_tick_count() {
        let fx = Fixture::new();
        let ctx = fx.ctx();
        // Pin the walk target by binding it to the sofa standoff so the
        // travel distance is known only after init; instead measure from
        // the recorded spawn.
        let script = script_of(vec![Keyframe::new(SkillId::Walk)], &[]);
        let trace = run_episode(&ctx, script, 7).unwrap();
        assert_eq!(trace.termination, TerminationReason::ScriptComplete);
        assert_eq!(trace.outcomes.len(), 1);
        assert!(trace.outcomes[0].success);
        // Travel distance from the first record's goal and spawn.
        let GoalCondition::Loco { target, .. } = trace.records[0].goal.clone() else {
            panic!("walk keyframe has a loco goal");
        };
        let first = &trace.records[0];
        // Reconstruct spawn position: first record is post-step.
        let spawn = first.char_state.root_pos.xy() - first.char_state.root_vel.xy().scale(fx.cfg.dt);
        let dist = (target - spawn).norm();
        // The hold starts once within loco_threshold of the target.
        let expect = ((dist - fx.cfg.loco_threshold) / (fx.cfg.walk_speed * fx.cfg.dt)).ceil()
            as i64
            + fx.cfg.hold_ticks() as i64;
        let got = trace.outcomes[0].ticks_used as i64;
        assert!(
            (got - expect).abs() <= 2,
            "ticks {got}, expected about {expect} for {dist:.3} m"
        );
    }

    #[test]
    fn walk_displacement_per_tick_matches_speed() {
        let fx = Fixture::new();
        let script = script_of(vec![Keyframe::new(SkillId::Walk)], &[]);
        let trace = run_episode(&fx.ctx(), script, 11).unwrap();
        // Mid-walk ticks displace by walk_speed * dt.
        let step = fx.cfg.walk_speed * fx.cfg.dt;
        for pair in trace.records.windows(2).take(10).skip(2) {
            let d = (pair[1].char_state.root_pos.xy() - pair[0].char_state.root_pos.xy()).norm();
            if d > 1e-9 {
                assert!((d - step).abs() < 1e-9, "step {d} != {step}");
            }
        }
    }

    #[test]
    fn completion_needs_fifteen_held_ticks() {
        let fx = Fixture::new();
        assert_eq!(fx.cfg.hold_ticks(), 15);
        // Idle holds its condition from the first tick: completion after
        // exactly hold_ticks.
        let script = script_of(vec![Keyframe::new(SkillId::Idle)], &[]);
        let trace = run_episode(&fx.ctx(), script, 3).unwrap();
        assert_eq!(trace.outcomes[0].ticks_used, 15);
        assert_eq!(trace.termination, TerminationReason::ScriptComplete);
    }

    #[test]
    fn hold_timer_resets_on_violation() {
        let fx = Fixture::new();
        let ctx = fx.ctx();
        let script = script_of(vec![Keyframe::new(SkillId::Walk)], &[]);
        let mut fsm = init_episode(&ctx, script, 9).unwrap();
        fsm.hold_ticks = 14;
        // Far from the target, the condition is violated on this tick.
        let _ = tick(&mut fsm, &ctx).unwrap();
        assert_eq!(fsm.hold_ticks, 0);
    }

    #[test]
    fn fall_detected_when_standing_pelvis_drops() {
        let fx = Fixture::new();
        let ctx = fx.ctx();
        let script = script_of(vec![Keyframe::new(SkillId::Walk)], &[]);
        let mut fsm = init_episode(&ctx, script, 2).unwrap();
        fsm.char_state.root_pos.z = 0.1;
        assert_eq!(
            check_termination(&fsm, &fx.cfg, 0.0),
            Some(TerminationReason::Fall)
        );
        // Seated at the same height is not a fall.
        fsm.char_state.posture = Posture::Seated;
        assert_eq!(check_termination(&fsm, &fx.cfg, 0.0), None);
    }

    #[test]
    fn horizon_and_force_termination() {
        let fx = Fixture::new();
        let ctx = fx.ctx();
        let script = script_of(vec![Keyframe::new(SkillId::Walk)], &[]);
        let mut fsm = init_episode(&ctx, script, 2).unwrap();
        assert_eq!(
            check_termination(&fsm, &fx.cfg, 6000.0),
            Some(TerminationReason::ExcessiveContactForce)
        );
        fsm.tick = fx.cfg.horizon;
        assert_eq!(
            check_termination(&fsm, &fx.cfg, 0.0),
            Some(TerminationReason::HorizonReached)
        );
    }

    #[test]
    fn success_hold_on_final_keyframe() {
        let fx = Fixture::new();
        let ctx = fx.ctx();
        let script = script_of(vec![Keyframe::new(SkillId::Walk)], &[]);
        let mut fsm = init_episode(&ctx, script, 2).unwrap();
        assert_eq!(fx.cfg.success_hold_ticks(), 60);
        fsm.hold_ticks = 60;
        assert_eq!(
            check_termination(&fsm, &fx.cfg, 0.0),
            Some(TerminationReason::SuccessHold)
        );
    }

    #[test]
    fn sit_and_getup_episode_succeeds() {
        let fx = Fixture::new();
        let script = script_of(
            vec![
                Keyframe::new(SkillId::Walk).with_object("sofa"),
                Keyframe::new(SkillId::Sit)
                    .with_object("sofa")
                    .with_caption("sit down and relax", StyleLabel::Relaxed),
                Keyframe::new(SkillId::GetUp).with_object("sofa"),
            ],
            &[(0, "sofa_0"), (1, "sofa_0"), (2, "sofa_0")],
        );
        let trace = run_episode(&fx.ctx(), script, 17).unwrap();
        assert_eq!(trace.termination, TerminationReason::ScriptComplete);
        assert_eq!(trace.outcomes.len(), 3);
        for outcome in &trace.outcomes {
            assert!(outcome.success, "{:?} failed", outcome.skill);
        }
        // Sit contact error within its threshold at completion.
        assert!(trace.outcomes[1].final_error <= fx.cfg.sit_threshold);
        assert!(trace.outcomes[2].final_error <= fx.cfg.getup_threshold);
    }

    #[test]
    fn carry_episode_succeeds() {
        let fx = Fixture::new();
        let script = script_of(
            vec![
                Keyframe::new(SkillId::Walk).with_object("crate"),
                Keyframe::new(SkillId::Carry)
                    .with_object("crate")
                    .with_caption("carry the crate across the room", StyleLabel::Neutral),
            ],
            &[(0, "crate_0"), (1, "crate_0")],
        );
        let mut cfg = EpisodeConfig::default();
        cfg.horizon = 1200;
        let registry = kinematic_registry();
        let embedder = TestEmbedder::new(64, 0);
        let style = StubStyleReward;
        let ctx = make_ctx(&fx.scene, &cfg, &registry, &embedder, &style);
        let trace = run_episode(&ctx, script, 23).unwrap();
        assert_eq!(trace.termination, TerminationReason::ScriptComplete);
        assert!(trace.outcomes.iter().all(|o| o.success));
        assert!(trace.outcomes[1].final_error <= cfg.carry_threshold);
    }

    #[test]
    fn rewards_and_combined_stay_in_unit_range() {
        let fx = Fixture::new();
        let script = script_of(
            vec![
                Keyframe::new(SkillId::Walk),
                Keyframe::new(SkillId::Sit)
                    .with_object("sofa")
                    .with_caption("sit", StyleLabel::Neutral),
            ],
            &[(1, "sofa_0")],
        );
        let trace = run_episode(&fx.ctx(), script, 29).unwrap();
        for rec in &trace.records {
            assert!(
                rec.reward.total >= -1e-9 && rec.reward.total <= 1.0 + 1e-9,
                "task reward {} out of range at tick {}",
                rec.reward.total,
                rec.tick
            );
            assert!(rec.combined >= -1e-9 && rec.combined <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn trace_round_trips_through_json() {
        let fx = Fixture::new();
        let script = script_of(vec![Keyframe::new(SkillId::Idle)], &[]);
        let trace = run_episode(&fx.ctx(), script, 31).unwrap();
        let text = serde_json::to_string(&trace).unwrap();
        let back: ExecutionTrace = serde_json::from_str(&text).unwrap();
        let text2 = serde_json::to_string(&back).unwrap();
        if text != text2 {
            let i = text
                .bytes()
                .zip(text2.bytes())
                .position(|(a, b)| a != b)
                .unwrap_or(text.len().min(text2.len()));
            let lo = i.saturating_sub(120);
            panic!(
                "serialized forms differ near byte {i}:\n A: {}\n B: {}",
                &text[lo..(i + 60).min(text.len())],
                &text2[lo..(i + 60).min(text2.len())]
            );
        }
        assert_eq!(trace, back);
    }

    #[test]
    fn infeasible_spawn_terminates_before_any_tick() {
        // Scene bounds always include a clear 1 m ring around the union
        // AABB, so a real infeasible spawn cannot be built from boxes;
        // verify the plumbing by marking the state infeasible directly.
        let fx = Fixture::new();
        let ctx = fx.ctx();
        let mut fsm = init_episode(&ctx, script_of(vec![Keyframe::new(SkillId::Idle)], &[]), 1)
            .unwrap();
        fsm.terminated = Some(TerminationReason::Infeasible);
        assert_eq!(
            check_termination(&fsm, ctx.cfg, 0.0),
            Some(TerminationReason::Infeasible)
        );
        assert_eq!(fsm.tick, 0);
    }

    #[test]
    fn cursor_is_monotonic() {
        let fx = Fixture::new();
        let ctx = fx.ctx();
        let script = script_of(
            vec![Keyframe::new(SkillId::Walk), Keyframe::new(SkillId::Idle)],
            &[],
        );
        let mut fsm = init_episode(&ctx, script, 13).unwrap();
        let mut last = fsm.cursor;
        while check_termination(&fsm, &fx.cfg, 0.0).is_none() {
            let _ = tick(&mut fsm, &ctx).unwrap();
            assert!(fsm.cursor >= last);
            last = fsm.cursor;
        }
    }
}
