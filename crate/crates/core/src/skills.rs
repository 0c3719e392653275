//! Policy contract and kinematic reference skill primitives.
//!
//! The primitives execute every skill without trained networks: they are
//! contraction maps toward their targets (distance non-increasing, exact
//! clamp on arrival), which makes the FSM and metrics pipeline testable
//! end to end. An externally trained controller can implement [`Policy`]
//! and be registered in place of them.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, EmbeddingProvider, EmbeddingVector, TestEmbedder};
use crate::math::{wrap_angle, Vec2, Vec3};
use crate::scene::nearest_surface_point;
use crate::scriptdb::SkillId;
use crate::tasks::{DynState, GetUpPhase, GoalCondition};

/// Joint speed cap for contact primitives, m/s.
pub const CONTACT_SPEED: f64 = 1.0;
/// Yaw turn rate cap, rad/s.
pub const TURN_RATE: f64 = std::f64::consts::PI;
/// Root distance at which a carry attaches hands to the object.
pub const ATTACH_RADIUS: f64 = 0.5;

/// Minimum joint set. Metrics operate on whatever joints are present, so
/// full skeletons from external policies extend this without changes.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum JointId {
    Pelvis,
    LeftHand,
    RightHand,
    LeftFoot,
    RightFoot,
    Head,
}

impl JointId {
    pub const ALL: [JointId; 6] = [
        JointId::Pelvis,
        JointId::LeftHand,
        JointId::RightHand,
        JointId::LeftFoot,
        JointId::RightFoot,
        JointId::Head,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Posture {
    Standing,
    Seated,
    Lying,
}

/// Proprioception s_t: root pose and velocity, facing, joint positions
/// and rotations, plus a coarse posture flag for the primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterState {
    pub root_pos: Vec3,
    pub root_vel: Vec3,
    pub yaw: f64,
    pub facing: Vec2,
    pub joints: BTreeMap<JointId, Vec3>,
    pub joint_rotations: BTreeMap<JointId, [f64; 4]>,
    pub posture: Posture,
}

impl CharacterState {
    /// Joint position; the pelvis is the root.
    pub fn joint(&self, id: JointId) -> Vec3 {
        if id == JointId::Pelvis {
            return self.root_pos;
        }
        self.joints.get(&id).copied().unwrap_or(self.root_pos)
    }
}

/// Joint offsets in the character frame (x forward, y left), relative to
/// the pelvis. Foot z is pinned to the ground instead.
fn local_offset(id: JointId) -> Vec3 {
    match id {
        JointId::Pelvis => Vec3::ZERO,
        JointId::Head => Vec3::new(0.0, 0.0, 0.7),
        JointId::LeftHand => Vec3::new(0.1, 0.25, -0.2),
        JointId::RightHand => Vec3::new(0.1, -0.25, -0.2),
        JointId::LeftFoot => Vec3::new(0.0, 0.12, 0.0),
        JointId::RightFoot => Vec3::new(0.0, -0.12, 0.0),
    }
}

fn identity_quat() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}

fn yaw_quat(yaw: f64) -> [f64; 4] {
    let (s, c) = (yaw / 2.0).sin_cos();
    [0.0, 0.0, s, c]
}

/// Recompute all joints rigidly from the root, skipping `hold` so a
/// contact primitive's constrained joint is not clobbered.
fn refresh_rigid_joints(state: &mut CharacterState, hold: Option<JointId>) {
    state.facing = Vec2::new(state.yaw.cos(), state.yaw.sin());
    for id in JointId::ALL {
        if id == JointId::Pelvis || Some(id) == hold {
            continue;
        }
        let mut p = state.root_pos + local_offset(id).rotated_z(state.yaw);
        if matches!(id, JointId::LeftFoot | JointId::RightFoot) {
            p.z = 0.0;
        }
        state.joints.insert(id, p);
        state.joint_rotations.insert(id, yaw_quat(state.yaw));
    }
    state.joints.insert(JointId::Pelvis, state.root_pos);
    state
        .joint_rotations
        .insert(JointId::Pelvis, yaw_quat(state.yaw));
}

/// Default standing pose at a ground position.
pub fn standing_state(pos: Vec2, yaw: f64, pelvis_z: f64) -> CharacterState {
    let mut state = CharacterState {
        root_pos: Vec3::new(pos.x, pos.y, pelvis_z),
        root_vel: Vec3::ZERO,
        yaw,
        facing: Vec2::new(yaw.cos(), yaw.sin()),
        joints: BTreeMap::new(),
        joint_rotations: BTreeMap::new(),
        posture: Posture::Standing,
    };
    state
        .joint_rotations
        .insert(JointId::Pelvis, identity_quat());
    refresh_rigid_joints(&mut state, None);
    state
}

/// Opaque policy output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action(pub Vec<f64>);

/// Observation bundle (s_t, h_t, g_t, z) handed to policies.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub proprio: CharacterState,
    /// Flattened 12x12 heightmap, 144 reals.
    pub heightmap: Vec<f64>,
    /// Per-template goal encoding; see [`encode_goal`].
    pub goal: Vec<f64>,
    pub z: EmbeddingVector,
}

/// Flat goal encoding: Loco 2 reals (target in the heading frame), HSI
/// 3 reals + a one-of-three joint flag, DOI 24 bbox reals + 3 target.
pub fn encode_goal(goal: &GoalCondition, state: &CharacterState) -> Vec<f64> {
    match goal {
        GoalCondition::Loco { target, .. } => {
            let local = (*target - state.root_pos.xy()).rotated(-state.yaw);
            vec![local.x, local.y]
        }
        GoalCondition::Hsi { target, joint, .. } => {
            let rel = *target - state.root_pos;
            let mut out = vec![rel.x, rel.y, rel.z];
            for candidate in [JointId::Pelvis, JointId::LeftHand, JointId::RightHand] {
                out.push(if *joint == candidate { 1.0 } else { 0.0 });
            }
            out
        }
        GoalCondition::Doi {
            bbox_corners,
            target,
            ..
        } => {
            let mut out = Vec::with_capacity(27);
            for c in bbox_corners {
                let rel = *c - state.root_pos;
                out.extend([rel.x, rel.y, rel.z]);
            }
            let rel = *target - state.root_pos;
            out.extend([rel.x, rel.y, rel.z]);
            out
        }
    }
}

/// Environment-side step context for [`Policy::advance`].
pub struct StepInput<'a> {
    pub state: &'a CharacterState,
    pub goal: &'a GoalCondition,
    /// Root state of the goal's dynamic object, if any.
    pub obj: Option<&'a DynState>,
    pub getup_phase: GetUpPhase,
    pub dt: f64,
}

pub struct StepOutput {
    pub state: CharacterState,
    /// Updated dynamic object state, for Carry.
    pub obj: Option<DynState>,
}

/// Policy contract: act on an observation, then integrate. Kinematic
/// policies do their work in `advance`; trained controllers encode the
/// action in `act` and integrate externally-simulated state here.
/// Implementations must be deterministic given (inputs, seed).
pub trait Policy: Send {
    fn act(&mut self, obs: &Observation) -> Action;
    fn advance(&mut self, input: &StepInput<'_>, action: &Action) -> StepOutput;
}

/// Style reward r^style over a recent motion window; range [0, 1].
pub trait StyleRewardProvider: Send + Sync {
    fn style_reward(&self, window: &MotionWindow<'_>, z: &EmbeddingVector) -> f64;
}

pub struct MotionWindow<'a> {
    pub states: &'a [CharacterState],
    pub skill: SkillId,
}

/// Text signature of a motion window: coarse, but deterministic and
/// enough to exercise the style-reward combination path.
pub fn window_signature(window: &MotionWindow<'_>) -> String {
    let posture = window
        .states
        .last()
        .map(|s| match s.posture {
            Posture::Standing => "standing",
            Posture::Seated => "seated",
            Posture::Lying => "lying",
        })
        .unwrap_or("empty");
    format!("{} {}", window.skill, posture)
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Deterministic stand-in for a trained motion discriminator:
/// `clamp01(0.5 + 0.5 * cos(embed(signature), z))`.
pub fn stub_style_reward(signature: &str, z: &EmbeddingVector) -> f64 {
    let embedder = TestEmbedder::new(z.dim(), 0);
    let sig = embedder.embed(signature).expect("signature embeds");
    clamp01(0.5 + 0.5 * cosine_similarity(&sig, z).unwrap_or(0.0))
}

/// Discriminator stub wired through the provider trait.
pub struct StubStyleReward;

impl StyleRewardProvider for StubStyleReward {
    fn style_reward(&self, window: &MotionWindow<'_>, z: &EmbeddingVector) -> f64 {
        if z.norm() == 0.0 {
            // No text condition: neutral style reward.
            return 0.5;
        }
        stub_style_reward(&window_signature(window), z)
    }
}

// --- kinematic primitives ---

/// Advance the root toward a 2D target at up to `speed`, clamping exactly
/// onto the target on arrival, turning at most [`TURN_RATE`] per second.
pub fn kinematic_walk(
    state: &CharacterState,
    target: Vec2,
    speed: f64,
    dt: f64,
) -> CharacterState {
    let mut next = state.clone();
    let root = state.root_pos.xy();
    let diff = target - root;
    let dist = diff.norm();
    let new_xy = if dist <= speed * dt {
        target
    } else {
        let dir = diff.normalized().expect("dist > 0");
        root + dir.scale(speed * dt)
    };
    if let Some(dir) = diff.normalized() {
        let desired = dir.y.atan2(dir.x);
        let delta = wrap_angle(desired - state.yaw);
        let max_turn = TURN_RATE * dt;
        next.yaw = wrap_angle(state.yaw + delta.clamp(-max_turn, max_turn));
    }
    next.root_pos = Vec3::new(new_xy.x, new_xy.y, state.root_pos.z);
    next.root_vel = (next.root_pos - state.root_pos).scale(1.0 / dt);
    next.posture = Posture::Standing;
    refresh_rigid_joints(&mut next, None);
    next
}

/// Move the constrained joint toward the re-queried contact point at
/// [`CONTACT_SPEED`], clamping on arrival. Pelvis-constrained skills move
/// the whole root; Reach moves only the chosen hand.
pub fn kinematic_contact(
    state: &CharacterState,
    goal: &GoalCondition,
    dt: f64,
    skill: SkillId,
) -> CharacterState {
    let GoalCondition::Hsi { joint, part, .. } = goal else {
        panic!("kinematic_contact requires an Hsi goal");
    };
    let joint_pos = state.joint(*joint);
    let contact = nearest_surface_point(part, joint_pos)
        .map(|(p, _)| p)
        .unwrap_or(joint_pos);
    let new_pos = step_toward(joint_pos, contact, CONTACT_SPEED * dt);
    let mut next = state.clone();
    next.posture = match skill {
        SkillId::Sit => Posture::Seated,
        SkillId::Lie => Posture::Lying,
        _ => state.posture,
    };
    if *joint == JointId::Pelvis {
        next.root_pos = new_pos;
        next.root_vel = (new_pos - state.root_pos).scale(1.0 / dt);
        refresh_rigid_joints(&mut next, None);
    } else {
        next.root_vel = Vec3::ZERO;
        refresh_rigid_joints(&mut next, Some(*joint));
        next.joints.insert(*joint, new_pos);
    }
    next
}

/// Raise the pelvis toward the standing target; posture flips to
/// Standing on arrival.
pub fn kinematic_getup(
    state: &CharacterState,
    standing_target: Vec3,
    dt: f64,
) -> CharacterState {
    let mut next = state.clone();
    let new_pos = step_toward(state.root_pos, standing_target, CONTACT_SPEED * dt);
    next.root_pos = new_pos;
    next.root_vel = (new_pos - state.root_pos).scale(1.0 / dt);
    next.posture = if new_pos == standing_target {
        Posture::Standing
    } else {
        state.posture
    };
    refresh_rigid_joints(&mut next, None);
    next
}

/// One carry tick. Phase is derived from geometry each call:
/// walk-to-object, carry (object rigidly at the hand midpoint), and
/// release exactly on the target once within `arrive_threshold`.
pub fn kinematic_carry(
    state: &CharacterState,
    obj: &DynState,
    goal: &GoalCondition,
    dt: f64,
) -> (CharacterState, DynState) {
    let GoalCondition::Doi {
        target,
        target_speed,
        arrive_threshold,
        ..
    } = goal
    else {
        panic!("kinematic_carry requires a Doi goal");
    };
    let obj_to_goal = (*target - obj.pos).norm();
    if obj_to_goal <= *arrive_threshold {
        // Released: object rests exactly on the target.
        let mut next = state.clone();
        next.root_vel = Vec3::ZERO;
        refresh_rigid_joints(&mut next, None);
        let placed = DynState {
            pos: *target,
            vel: Vec3::ZERO,
        };
        return (next, placed);
    }
    let root_to_obj = (obj.pos.xy() - state.root_pos.xy()).norm();
    if root_to_obj > ATTACH_RADIUS {
        // Walk to the object first; it stays put.
        let next = kinematic_walk(state, obj.pos.xy(), *target_speed, dt);
        return (next, DynState { pos: obj.pos, vel: Vec3::ZERO });
    }
    // Carry: root walks toward the goal, hands hold the object ahead of
    // the chest, object root follows the hand midpoint.
    let mut next = kinematic_walk(state, target.xy(), *target_speed, dt);
    let carry_height = obj.pos.z.max(goal_height(*target));
    let forward = Vec3::new(next.facing.x, next.facing.y, 0.0);
    let left = Vec3::new(-next.facing.y, next.facing.x, 0.0);
    let mid = Vec3::new(next.root_pos.x, next.root_pos.y, carry_height) + forward.scale(0.35);
    next.joints.insert(JointId::LeftHand, mid + left.scale(0.15));
    next.joints.insert(JointId::RightHand, mid - left.scale(0.15));
    let mut new_obj_pos = mid;
    // Snap the object onto the target once the hands bring it within
    // reach of the drop point.
    if (*target - new_obj_pos).norm() <= *arrive_threshold {
        new_obj_pos = *target;
    }
    let obj_vel = (new_obj_pos - obj.pos).scale(1.0 / dt);
    (
        next,
        DynState {
            pos: new_obj_pos,
            vel: obj_vel,
        },
    )
}

fn goal_height(target: Vec3) -> f64 {
    target.z
}

fn step_toward(from: Vec3, to: Vec3, max_step: f64) -> Vec3 {
    let diff = to - from;
    let dist = diff.norm();
    if dist <= max_step {
        to
    } else {
        from + diff.scale(max_step / dist)
    }
}

// --- kinematic policy + registry ---

/// Reference executor for one skill, built on the primitives above.
/// Interaction skills walk themselves within range before contacting, so
/// a plan without an explicit approach keyframe still executes.
pub struct KinematicPolicy {
    skill: SkillId,
}

impl KinematicPolicy {
    pub fn new(skill: SkillId) -> Self {
        KinematicPolicy { skill }
    }
}

impl Policy for KinematicPolicy {
    fn act(&mut self, _obs: &Observation) -> Action {
        // Kinematic policies integrate in advance(); the action is empty.
        Action(Vec::new())
    }

    fn advance(&mut self, input: &StepInput<'_>, _action: &Action) -> StepOutput {
        let state = input.state;
        let dt = input.dt;
        match (self.skill, input.goal) {
            (SkillId::Walk, GoalCondition::Loco { target, target_speed, .. }) => StepOutput {
                state: kinematic_walk(state, *target, *target_speed, dt),
                obj: None,
            },
            (SkillId::Idle, GoalCondition::Loco { .. }) => {
                let mut next = state.clone();
                next.root_vel = Vec3::ZERO;
                next.posture = Posture::Standing;
                refresh_rigid_joints(&mut next, None);
                StepOutput {
                    state: next,
                    obj: None,
                }
            }
            (SkillId::Sit | SkillId::Lie | SkillId::Reach, goal @ GoalCondition::Hsi { target, target_speed, .. }) => {
                // Approach on foot until within contact range.
                if (target.xy() - state.root_pos.xy()).norm() > ATTACH_RADIUS {
                    StepOutput {
                        state: kinematic_walk(state, target.xy(), *target_speed, dt),
                        obj: None,
                    }
                } else {
                    StepOutput {
                        state: kinematic_contact(state, goal, dt, self.skill),
                        obj: None,
                    }
                }
            }
            (SkillId::GetUp, goal @ GoalCondition::Hsi { standing_target, target, .. }) => {
                match input.getup_phase {
                    GetUpPhase::Seated => StepOutput {
                        state: kinematic_contact(state, goal, dt, self.skill),
                        obj: None,
                    },
                    GetUpPhase::Rising => {
                        let stand = standing_target
                            .unwrap_or(Vec3::new(target.x, target.y, 0.9));
                        StepOutput {
                            state: kinematic_getup(state, stand, dt),
                            obj: None,
                        }
                    }
                }
            }
            (SkillId::Carry, goal @ GoalCondition::Doi { .. }) => {
                let obj = input.obj.expect("carry requires a dynamic object");
                let (next, new_obj) = kinematic_carry(state, obj, goal, dt);
                StepOutput {
                    state: next,
                    obj: Some(new_obj),
                }
            }
            (skill, goal) => panic!("kinematic {skill} cannot execute goal {goal:?}"),
        }
    }
}

/// Hands out one policy instance per (skill, episode).
#[derive(Clone)]
pub struct PolicyRegistry {
    factories: BTreeMap<SkillId, Arc<dyn Fn() -> Box<dyn Policy> + Send + Sync>>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        PolicyRegistry {
            factories: BTreeMap::new(),
        }
    }
}

impl PolicyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, skill: SkillId, factory: F)
    where
        F: Fn() -> Box<dyn Policy> + Send + Sync + 'static,
    {
        self.factories.insert(skill, Arc::new(factory));
    }

    pub fn make(&self, skill: SkillId) -> Option<Box<dyn Policy>> {
        self.factories.get(&skill).map(|f| f())
    }

    pub fn has(&self, skill: SkillId) -> bool {
        self.factories.contains_key(&skill)
    }
}

/// Registry with the kinematic reference executor for all seven skills.
pub fn kinematic_registry() -> PolicyRegistry {
    let mut registry = PolicyRegistry::new();
    for skill in SkillId::ALL {
        registry.register(skill, move || Box::new(KinematicPolicy::new(skill)));
    }
    registry
}
