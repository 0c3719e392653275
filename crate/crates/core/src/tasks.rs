//! Task templates: goal-condition construction for Loco/HSI/DOI and the
//! per-template reward functions, plus reward combination and the
//! discounted return.
//!
//! All rewards are pure functions with every term and total in [0, 1].
//! Branch conditions are on the squared distance exactly as the
//! templates state (`||.||^2 > 0.5`), not the distance.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Vec2, Vec3};
use crate::scene::{nearest_surface_point, PointCloud, Scene, SceneError};
use crate::skills::{CharacterState, JointId};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("no feasible target found inside scene bounds")]
    NoFeasibleTarget,
    #[error("object {0} is not dynamic")]
    StaticObject(String),
    #[error("object {0} not found in scene")]
    UnknownObject(String),
    #[error("part '{part}' not found on object {object}")]
    UnknownPart { object: String, part: String },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("reward input out of range: {0}")]
    OutOfRange(String),
}

/// Walk drives to a distant target; Idle anchors near the current spot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocoMode {
    Walk,
    Idle,
}

/// GetUp staging: seated contact first, then rise to standing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GetUpPhase {
    Seated,
    Rising,
}

/// Root state of a dynamic object during an episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynState {
    pub pos: Vec3,
    pub vel: Vec3,
}

/// Per-template goal condition g_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GoalCondition {
    Loco {
        target: Vec2,
        target_speed: f64,
        mode: LocoMode,
    },
    Hsi {
        /// Contact target at creation time; the per-tick contact point is
        /// re-queried against `part`.
        target: Vec3,
        joint: JointId,
        object_id: String,
        part: PointCloud,
        target_speed: f64,
        /// Standing pelvis target for the GetUp rising phase.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        standing_target: Option<Vec3>,
    },
    Doi {
        bbox_corners: [Vec3; 8],
        target: Vec3,
        target_speed: f64,
        object_id: String,
        /// Object-to-goal distance below which the goal velocity is zero.
        arrive_threshold: f64,
    },
}

/// Which side of the squared-distance branch a reward took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Far,
    Near,
}

/// Total reward plus its named terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub total: f64,
    pub branch: Branch,
    pub terms: Vec<(String, f64)>,
}

impl RewardBreakdown {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Episode-level constants: timing, weights, thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Simulation step, seconds (30 Hz).
    pub dt: f64,
    /// Horizon T, ticks.
    pub horizon: usize,
    /// Discount factor.
    pub gamma: f64,
    pub lambda_style: f64,
    pub lambda_task: f64,
    /// Success thresholds, meters.
    pub sit_threshold: f64,
    pub reach_threshold: f64,
    pub lie_threshold: f64,
    pub carry_threshold: f64,
    pub loco_threshold: f64,
    pub getup_threshold: f64,
    /// Completion must hold this long, seconds.
    pub hold_time: f64,
    /// Final-keyframe hold that terminates the episode, seconds.
    pub success_hold_terminate: f64,
    pub max_contact_force: f64,
    /// Pelvis height below which a standing character has fallen.
    pub fall_height: f64,
    /// Default walking / approach speed, m/s.
    pub walk_speed: f64,
    /// Standing pelvis height for GetUp targets and spawn poses.
    pub standing_pelvis_height: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            dt: 1.0 / 30.0,
            horizon: 300,
            gamma: 0.99,
            lambda_style: 0.5,
            lambda_task: 0.5,
            sit_threshold: 0.20,
            reach_threshold: 0.20,
            lie_threshold: 0.30,
            carry_threshold: 0.20,
            loco_threshold: 0.20,
            getup_threshold: 0.10,
            hold_time: 0.5,
            success_hold_terminate: 2.0,
            max_contact_force: 5000.0,
            fall_height: 0.3,
            walk_speed: 1.5,
            standing_pelvis_height: 0.9,
        }
    }
}

impl EpisodeConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn hold_ticks(&self) -> usize {
        (self.hold_time / self.dt).round() as usize
    }

    pub fn success_hold_ticks(&self) -> usize {
        (self.success_hold_terminate / self.dt).round() as usize
    }
}

/// Loco goal: Walk samples a ground target at least 1 m out; Idle anchors
/// at the current root position with zero target speed.
pub fn make_loco_goal(
    state: &CharacterState,
    mode: LocoMode,
    bounds: (Vec2, Vec2),
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<GoalCondition, TaskError> {
    match mode {
        LocoMode::Idle => Ok(GoalCondition::Loco {
            target: state.root_pos.xy(),
            target_speed: 0.0,
            mode,
        }),
        LocoMode::Walk => {
            let (lo, hi) = bounds;
            let root = state.root_pos.xy();
            for _ in 0..10_000 {
                let p = Vec2::new(
                    rng.random_range(lo.x..=hi.x),
                    rng.random_range(lo.y..=hi.y),
                );
                if (p - root).norm() >= 1.0 {
                    return Ok(GoalCondition::Loco {
                        target: p,
                        target_speed: cfg.walk_speed,
                        mode,
                    });
                }
            }
            Err(TaskError::NoFeasibleTarget)
        }
    }
}

/// HSI goal: contact target is the nearest part point to the constrained
/// joint. For Reach the nearer of the two hands is chosen.
pub fn make_hsi_goal(
    scene: &Scene,
    object_id: &str,
    part_label: &str,
    joint: JointId,
    state: &CharacterState,
    cfg: &EpisodeConfig,
) -> Result<GoalCondition, TaskError> {
    let object = scene
        .object(object_id)
        .ok_or_else(|| TaskError::UnknownObject(object_id.to_string()))?;
    let part = object
        .part(part_label)
        .ok_or_else(|| TaskError::UnknownPart {
            object: object_id.to_string(),
            part: part_label.to_string(),
        })?;
    let joint = match joint {
        JointId::LeftHand | JointId::RightHand => {
            // Pick whichever hand is nearer to the part.
            let lh = state.joint(JointId::LeftHand);
            let rh = state.joint(JointId::RightHand);
            let (_, dl) = nearest_surface_point(part, lh)?;
            let (_, dr) = nearest_surface_point(part, rh)?;
            if dl <= dr {
                JointId::LeftHand
            } else {
                JointId::RightHand
            }
        }
        other => other,
    };
    let (target, _) = nearest_surface_point(part, state.joint(joint))?;
    Ok(GoalCondition::Hsi {
        target,
        joint,
        object_id: object_id.to_string(),
        part: part.clone(),
        target_speed: cfg.walk_speed,
        standing_target: None,
    })
}

/// DOI goal: the object's 8 world AABB corners plus a carry target; the
/// target defaults to a sampled ground point at the object's half height.
pub fn make_doi_goal(
    scene: &Scene,
    object_id: &str,
    target_pos: Option<Vec3>,
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<GoalCondition, TaskError> {
    let object = scene
        .object(object_id)
        .ok_or_else(|| TaskError::UnknownObject(object_id.to_string()))?;
    if !object.dynamic {
        return Err(TaskError::StaticObject(object_id.to_string()));
    }
    let half_height = object.aabb.extent().z / 2.0;
    let target = match target_pos {
        Some(t) => t,
        None => {
            let (lo, hi) = scene.bounds;
            Vec3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                half_height,
            )
        }
    };
    Ok(GoalCondition::Doi {
        bbox_corners: object.aabb.corners(),
        target,
        target_speed: cfg.walk_speed,
        object_id: object_id.to_string(),
        arrive_threshold: cfg.carry_threshold,
    })
}

fn sq(x: f64) -> f64 {
    x * x
}

/// Direction from the root to the target; at the singularity the facing
/// direction substitutes so the reward stays defined.
fn direction_or_facing2(diff: Vec2, facing: Vec2) -> Vec2 {
    diff.normalized().unwrap_or(facing)
}

fn direction_or_facing3(diff: Vec3, facing: Vec2) -> Vec3 {
    diff.normalized()
        .unwrap_or(Vec3::new(facing.x, facing.y, 0.0))
}

/// Locomotion (Walk) reward. Positions are 2D.
pub fn loco_reward(
    state: &CharacterState,
    prev_state: &CharacterState,
    goal: &GoalCondition,
) -> RewardBreakdown {
    let GoalCondition::Loco {
        target,
        target_speed,
        ..
    } = goal
    else {
        panic!("loco_reward requires a Loco goal");
    };
    let root = state.root_pos.xy();
    let diff = *target - root;
    loco_core(
        diff.norm_sq(),
        diff,
        *target_speed,
        state,
        prev_state,
    )
}

/// Idle variant: the distance is clamped by the 3 m allowance, so any
/// position within 3 m of the anchor counts as on-target.
pub fn idle_reward(
    state: &CharacterState,
    prev_state: &CharacterState,
    goal: &GoalCondition,
) -> RewardBreakdown {
    let GoalCondition::Loco {
        target,
        target_speed,
        ..
    } = goal
    else {
        panic!("idle_reward requires a Loco goal");
    };
    let root = state.root_pos.xy();
    let diff = *target - root;
    let eff = (diff.norm() - 3.0).max(0.0);
    loco_core(sq(eff), diff, *target_speed, state, prev_state)
}

fn loco_core(
    dist_sq: f64,
    raw_diff: Vec2,
    target_speed: f64,
    state: &CharacterState,
    prev_state: &CharacterState,
) -> RewardBreakdown {
    let facing = state.facing;
    let dir = direction_or_facing2(raw_diff, facing);
    let vel = state.root_vel.xy();
    let r_near = (-10.0 * dist_sq).exp();
    let r_far = 0.6 * (-0.5 * dist_sq).exp()
        + 0.2 * (-2.0 * sq(target_speed - dir.dot(vel))).exp()
        + 0.2 * sq(dir.dot(facing));
    let r_still = (-2.0 * (vel - prev_state.root_vel.xy()).norm_sq()).exp();
    let (branch, total) = if dist_sq > 0.5 {
        (Branch::Far, 0.4 * r_near + 0.5 * r_far)
    } else {
        (Branch::Near, 0.4 * r_near + 0.5 + 0.1 * r_still)
    };
    RewardBreakdown {
        total,
        branch,
        terms: vec![
            ("near".into(), r_near),
            ("far".into(), r_far),
            ("still".into(), r_still),
        ],
    }
}

/// HSI reward. The contact target is re-queried each call as the nearest
/// part point to the constrained joint.
pub fn hsi_reward(
    state: &CharacterState,
    joint_pos: Vec3,
    goal: &GoalCondition,
) -> RewardBreakdown {
    let GoalCondition::Hsi {
        target,
        part,
        target_speed,
        ..
    } = goal
    else {
        panic!("hsi_reward requires an Hsi goal");
    };
    let contact = nearest_surface_point(part, joint_pos)
        .map(|(p, _)| p)
        .unwrap_or(*target);
    hsi_core(*target, contact, joint_pos, *target_speed, state)
}

fn hsi_core(
    approach_target: Vec3,
    contact_target: Vec3,
    joint_pos: Vec3,
    target_speed: f64,
    state: &CharacterState,
) -> RewardBreakdown {
    let root = state.root_pos;
    let diff = approach_target - root;
    let dist_sq = diff.norm_sq();
    let dir = direction_or_facing3(diff, state.facing);
    let r_near = (-10.0 * (contact_target - joint_pos).norm_sq()).exp();
    let r_far = (-2.0 * sq(target_speed - dir.dot(state.root_vel))).exp();
    let (branch, total) = if dist_sq > 0.5 {
        (Branch::Far, 0.7 * r_near + 0.3 * r_far)
    } else {
        (Branch::Near, 0.7 * r_near + 0.3)
    };
    RewardBreakdown {
        total,
        branch,
        terms: vec![("near".into(), r_near), ("far".into(), r_far)],
    }
}

/// GetUp staging: seated phase rewards contact with the seat point,
/// rising phase rewards the pelvis reaching the standing target, both in
/// the HSI contact-reward form.
pub fn getup_reward(
    state: &CharacterState,
    joint_pos: Vec3,
    goal: &GoalCondition,
    phase: GetUpPhase,
) -> RewardBreakdown {
    match phase {
        GetUpPhase::Seated => hsi_reward(state, joint_pos, goal),
        GetUpPhase::Rising => {
            let GoalCondition::Hsi {
                standing_target,
                target,
                target_speed,
                ..
            } = goal
            else {
                panic!("getup_reward requires an Hsi goal");
            };
            let stand = standing_target.unwrap_or(Vec3::new(
                target.x,
                target.y,
                0.9,
            ));
            hsi_core(stand, stand, joint_pos, *target_speed, state)
        }
    }
}

/// DOI (Carry) reward. All positions 3D; the goal velocity points from
/// the object to the target at the target speed and is zero once within
/// the arrival threshold.
pub fn doi_reward(
    state: &CharacterState,
    hand_pos: Vec3,
    obj: &DynState,
    goal: &GoalCondition,
) -> RewardBreakdown {
    let GoalCondition::Doi {
        target,
        target_speed,
        arrive_threshold,
        ..
    } = goal
    else {
        panic!("doi_reward requires a Doi goal");
    };
    let to_goal = *target - obj.pos;
    let v_goal = if to_goal.norm() <= *arrive_threshold {
        Vec3::ZERO
    } else {
        to_goal
            .normalized()
            .map(|d| d.scale(*target_speed))
            .unwrap_or(Vec3::ZERO)
    };
    let r_walk = 0.8 * (-10.0 * (state.root_pos - obj.pos).norm_sq()).exp()
        + 0.2 * (-2.0 * (state.root_vel - v_goal).norm_sq()).exp();
    let r_hand = (-0.5 * (hand_pos - obj.pos).norm_sq()).exp();
    let r_carry = 0.7 * (-10.0 * to_goal.norm_sq()).exp()
        + 0.3 * (-2.0 * (obj.vel - v_goal).norm_sq()).exp();
    let (branch, total) = if to_goal.norm_sq() > 0.5 {
        (Branch::Far, 0.3 * r_walk + 0.5 * r_carry + 0.2 * r_hand)
    } else {
        (Branch::Near, 0.3 * r_walk + 0.5 * r_carry + 0.2)
    };
    RewardBreakdown {
        total,
        branch,
        terms: vec![
            ("walk".into(), r_walk),
            ("carry".into(), r_carry),
            ("hand".into(), r_hand),
        ],
    }
}

/// The nearer hand to a reference point; used by the DOI template.
pub fn nearer_hand(state: &CharacterState, reference: Vec3) -> Vec3 {
    let lh = state.joint(JointId::LeftHand);
    let rh = state.joint(JointId::RightHand);
    if (lh - reference).norm_sq() <= (rh - reference).norm_sq() {
        lh
    } else {
        rh
    }
}

/// Weighted combination of style and task rewards.
pub fn combine(style_r: f64, task_r: f64, cfg: &EpisodeConfig) -> Result<f64, TaskError> {
    for (name, v) in [("style", style_r), ("task", task_r)] {
        if !(0.0..=1.0 + 1e-9).contains(&v) {
            return Err(TaskError::OutOfRange(format!("{name} reward {v}")));
        }
    }
    Ok(cfg.lambda_style * style_r + cfg.lambda_task * task_r)
}

/// Discounted return over a reward sequence.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&gamma));
    rewards
        .iter()
        .rev()
        .fold(0.0, |acc, r| r + gamma * acc)
}
