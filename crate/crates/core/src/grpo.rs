//! Group-relative advantages and masked per-token credit.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RewardBreakdown;
use crate::trajectory::{Segment, Terminal, Trajectory};

pub const STD_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("group has {trajectories} trajectories but {rewards} rewards")]
    SizeMismatch { trajectories: usize, rewards: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rollouts of one prompt with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
}

impl Group {
    pub fn new(
        prompt_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        rewards: Vec<RewardBreakdown>,
    ) -> Result<Self, GrpoError> {
        if trajectories.len() != rewards.len() {
            return Err(GrpoError::SizeMismatch {
                trajectories: trajectories.len(),
                rewards: rewards.len(),
            });
        }
        if rewards.len() < 2 {
            return Err(GrpoError::GroupTooSmall(rewards.len()));
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            trajectories,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }

    pub fn advantages(&self) -> AdvantageSet {
        let (scalar, degenerate) = group_advantages(&self.totals()).expect("group size checked at construction");
        let token_adv = self
            .trajectories
            .iter()
            .zip(&scalar)
            .map(|(t, &a)| token_advantages(t, a))
            .collect();
        AdvantageSet {
            scalar,
            token_adv,
            degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub scalar: Vec<f64>,
    pub token_adv: Vec<Vec<f64>>,
    pub degenerate: bool,
}

/// `(r - mean) / (std_pop + eps)` per reward. A group whose rewards are all
/// equal is degenerate and gets zeros.
pub fn group_advantages(rewards: &[f64]) -> Result<(Vec<f64>, bool), GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok((vec![0.0; n], true));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + STD_EPS;
    Ok((rewards.iter().map(|r| (r - mean) / denom).collect(), false))
}

/// Broadcasts `scalar` over policy tokens; observation tokens get 0.
pub fn token_advantages(traj: &Trajectory, scalar: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(traj.total_tokens());
    for seg in traj.segments() {
        let v = if seg.is_policy() { scalar } else { 0.0 };
        out.extend(std::iter::repeat_n(v, seg.token_len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub prompt_id: String,
    pub index: usize,
    pub question_id: String,
    pub image_ref: String,
    pub segments: Vec<Segment>,
    pub tool_call_count: usize,
    pub terminal: Option<Terminal>,
    pub reward: RewardBreakdown,
    pub scalar_adv: f64,
    pub mask: Vec<(u8, usize)>,
    pub degenerate: bool,
}

/// One record per trajectory, groups in order, trajectories in group order.
pub fn batch_records(groups: &[Group]) -> Vec<BatchRecord> {
    let mut out = Vec::new();
    for g in groups {
        let adv = g.advantages();
        for (i, (t, r)) in g.trajectories.iter().zip(&g.rewards).enumerate() {
            out.push(BatchRecord {
                prompt_id: g.prompt_id.clone(),
                index: i,
                question_id: t.question_id.clone(),
                image_ref: t.image_ref.clone(),
                segments: t.segments().to_vec(),
                tool_call_count: t.tool_call_count(),
                terminal: t.terminal().cloned(),
                reward: *r,
                scalar_adv: adv.scalar[i],
                mask: t.loss_mask().rle(),
                degenerate: adv.degenerate,
            });
        }
    }
    out
}

/// Writes the batch as line-delimited JSON.
pub fn export_batch<W: Write>(groups: &[Group], mut out: W) -> Result<usize, GrpoError> {
    let records = batch_records(groups);
    for rec in &records {
        serde_json::to_writer(&mut out, rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Budget;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn examples() {
        assert_eq!(group_advantages(&[1.0; 4]).unwrap(), (vec![0.0; 4], true));
        let (a, d) = group_advantages(&[1.0, 0.0]).unwrap();
        assert!(!d && close(&a, &[1.0, -1.0], 1e-5));
        let (a, _) = group_advantages(&[1.5, 1.0, 0.0, 0.0]).unwrap();
        assert!(close(&a, &[1.3472, 0.5773, -0.9623, -0.9623], 1e-4), "{a:?}");
        assert!(matches!(group_advantages(&[1.0]), Err(GrpoError::GroupTooSmall(1))));
    }

    fn traj_with_obs() -> Trajectory {
        let mut t = Trajectory::new("q", "i", Budget::default());
        t.append_policy_text(
            r#"<think>z</think><tool_call>{"name": "image_zoom_in_tool", "arguments": {"bbox_2d": [0, 0, 50, 50]}}</tool_call>"#,
            2,
        )
        .unwrap();
        t.append_observation("image_zoom_in_tool", None, "crop", 1).unwrap();
        t.append_policy_text("<think>a</think><answer>x</answer>", 1).unwrap();
        t
    }

    #[test]
    fn token_broadcast() {
        assert_eq!(token_advantages(&traj_with_obs(), 2.0), vec![2.0, 2.0, 0.0, 2.0]);
    }

    fn breakdown(total: f64) -> RewardBreakdown {
        RewardBreakdown { acc: total, format: 0.0, tool: 0.0, total }
    }

    #[test]
    fn export_is_stable_and_flags_degenerate() {
        let t = traj_with_obs();
        let g1 = Group::new("p1", vec![t.clone(), t.clone()], vec![breakdown(1.0), breakdown(0.0)]).unwrap();
        let g2 = Group::new("p2", vec![t.clone(), t], vec![breakdown(1.0), breakdown(1.0)]).unwrap();
        let groups = [g1, g2];
        let mut a = Vec::new();
        assert_eq!(export_batch(&groups, &mut a).unwrap(), 4);
        let mut b = Vec::new();
        export_batch(&groups, &mut b).unwrap();
        assert_eq!(a, b);
        let lines: Vec<BatchRecord> = String::from_utf8(a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(
            lines.iter().map(|r| (r.prompt_id.as_str(), r.index, r.degenerate)).collect::<Vec<_>>(),
            vec![("p1", 0, false), ("p1", 1, false), ("p2", 0, true), ("p2", 1, true)]
        );
    }

    #[test]
    fn group_shape_checks() {
        let t = traj_with_obs();
        assert!(matches!(
            Group::new("p", vec![t.clone()], vec![breakdown(1.0), breakdown(0.0)]),
            Err(GrpoError::SizeMismatch { .. })
        ));
        assert!(matches!(Group::new("p", vec![t], vec![breakdown(1.0)]), Err(GrpoError::GroupTooSmall(1))));
    }
}
