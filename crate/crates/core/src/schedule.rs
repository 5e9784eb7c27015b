//! Sequence-length curriculum: ordered stages with token or wall-time budgets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive length ratios above this draw a warning.
pub const DEFAULT_GAP_THRESHOLD: f64 = 4.0;

const SHARE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    #[default]
    Tokens,
    WallTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageBudget {
    /// Absolute token count (token schedules only).
    Tokens(u64),
    /// Fraction of the run's total budget.
    Share(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub seq_len: usize,
    pub budget: StageBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    stages: Vec<Stage>,
    budget_kind: BudgetKind,
}

pub fn build_schedule(lengths: &[usize], budgets: &[StageBudget], budget_kind: BudgetKind) -> Result<Schedule> {
    if lengths.is_empty() {
        return Err(Error::Config("schedule needs at least one stage".into()));
    }
    if lengths.len() != budgets.len() {
        return Err(Error::Config(format!(
            "{} lengths but {} budgets",
            lengths.len(),
            budgets.len()
        )));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l < 2) {
        return Err(Error::Schedule(format!("stage seq_len {l} below 2")));
    }
    if let Some(w) = lengths.windows(2).find(|w| w[1] <= w[0]) {
        return Err(Error::Schedule(format!(
            "lengths must strictly increase, got {} then {}",
            w[0], w[1]
        )));
    }
    let shares = budgets.iter().filter(|b| matches!(b, StageBudget::Share(_))).count();
    if shares != 0 && shares != budgets.len() {
        return Err(Error::Config("stage budgets mix token counts and shares".into()));
    }
    for b in budgets {
        let ok = match *b {
            StageBudget::Tokens(n) => n > 0,
            StageBudget::Share(s) => s > 0.0 && s.is_finite(),
        };
        if !ok {
            return Err(Error::Schedule(format!("stage budget {b:?} must be positive")));
        }
    }
    if shares == 0 && budget_kind == BudgetKind::WallTime {
        return Err(Error::Config("wall-time schedules take share budgets".into()));
    }
    if shares > 0 {
        let total: f64 = budgets
            .iter()
            .map(|b| match b {
                StageBudget::Share(s) => *s,
                StageBudget::Tokens(_) => 0.0,
            })
            .sum();
        if (total - 1.0).abs() > SHARE_TOLERANCE {
            return Err(Error::Config(format!("stage shares sum to {total}, not 1")));
        }
    }
    let stages = lengths
        .iter()
        .zip(budgets)
        .map(|(&seq_len, &budget)| Stage { seq_len, budget })
        .collect();
    Ok(Schedule { stages, budget_kind })
}

/// Equal shares over `lengths`.
pub fn equal_shares(lengths: &[usize], budget_kind: BudgetKind) -> Result<Schedule> {
    let n = lengths.len().max(1);
    let mut budgets = vec![StageBudget::Share(1.0 / n as f64); lengths.len()];
    // keep the sum at exactly 1 under rounding
    if let Some(last) = budgets.last_mut() {
        *last = StageBudget::Share(1.0 - (n - 1) as f64 / n as f64);
    }
    build_schedule(lengths, &budgets, budget_kind)
}

impl Schedule {
    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn budget_kind(&self) -> BudgetKind {
        self.budget_kind
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.seq_len).collect()
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn final_seq_len(&self) -> usize {
        self.stages.last().expect("non-empty").seq_len
    }

    /// Total tokens when stages carry absolute token budgets.
    pub fn absolute_tokens(&self) -> Option<u64> {
        self.stages
            .iter()
            .map(|s| match s.budget {
                StageBudget::Tokens(n) => Some(n),
                StageBudget::Share(_) => None,
            })
            .sum()
    }

    fn shares(&self) -> Option<Vec<f64>> {
        self.stages
            .iter()
            .map(|s| match s.budget {
                StageBudget::Share(x) => Some(x),
                StageBudget::Tokens(_) => None,
            })
            .collect()
    }

    /// Token budgets per stage summing exactly to `total`: non-final stages take
    /// `floor(share * total)`, the final stage takes the remainder.
    pub fn split_tokens(&self, total: u64) -> Result<Vec<u64>> {
        if self.budget_kind != BudgetKind::Tokens {
            return Err(Error::Config("token split of a wall-time schedule".into()));
        }
        if let Some(abs) = self.absolute_tokens() {
            if abs != total {
                return Err(Error::Config(format!(
                    "stage token budgets sum to {abs}, total is {total}"
                )));
            }
            return Ok(self.stages.iter().map(|s| match s.budget {
                StageBudget::Tokens(n) => n,
                StageBudget::Share(_) => unreachable!(),
            }).collect());
        }
        let shares = self.shares().expect("share budgets");
        let mut out: Vec<u64> = shares[..shares.len() - 1]
            .iter()
            .map(|s| (s * total as f64).floor() as u64)
            .collect();
        let used: u64 = out.iter().sum();
        out.push(total - used.min(total));
        Ok(out)
    }

    /// Optimizer steps per stage at a constant `tokens_per_batch`; stage
    /// boundaries land on batch boundaries, the final stage absorbs rounding.
    pub fn split_steps(&self, total_tokens: u64, tokens_per_batch: u64) -> Result<Vec<u64>> {
        if tokens_per_batch == 0 || total_tokens % tokens_per_batch != 0 {
            return Err(Error::Config(format!(
                "total budget {total_tokens} is not a multiple of tokens_per_batch {tokens_per_batch}"
            )));
        }
        let tokens = self.split_tokens(total_tokens)?;
        let total_steps = total_tokens / tokens_per_batch;
        let mut steps: Vec<u64> = tokens[..tokens.len() - 1].iter().map(|t| t / tokens_per_batch).collect();
        let used: u64 = steps.iter().sum();
        steps.push(total_steps - used);
        if let Some(i) = steps.iter().position(|&s| s == 0) {
            return Err(Error::Schedule(format!(
                "stage {i} (seq_len {}) gets no full batch",
                self.stages[i].seq_len
            )));
        }
        Ok(steps)
    }

    /// Seconds per stage for a wall-time schedule.
    pub fn split_seconds(&self, total_s: f64) -> Result<Vec<f64>> {
        let shares = self
            .shares()
            .ok_or_else(|| Error::Config("wall-time split needs share budgets".into()))?;
        Ok(shares.iter().map(|s| s * total_s).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewRow {
    pub stage_index: usize,
    pub seq_len: usize,
    /// Tokens (token schedules) or seconds (wall-time schedules).
    pub budget: f64,
    pub batch_size: Option<usize>,
    pub steps: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preview {
    pub budget_kind: BudgetKind,
    pub total_budget: f64,
    pub rows: Vec<PreviewRow>,
    pub warnings: Vec<GapWarning>,
}

/// Absolute per-stage budgets and, for token schedules with a known batch
/// size, predicted step counts.
pub fn preview(schedule: &Schedule, total_budget: f64, tokens_per_batch: Option<u64>) -> Result<Preview> {
    if !(total_budget > 0.0) || !total_budget.is_finite() {
        return Err(Error::Config(format!("total budget must be positive, got {total_budget}")));
    }
    let budgets: Vec<f64> = match schedule.budget_kind {
        BudgetKind::Tokens => {
            if total_budget.fract() != 0.0 {
                return Err(Error::Config("token budget must be an integer".into()));
            }
            schedule
                .split_tokens(total_budget as u64)?
                .into_iter()
                .map(|t| t as f64)
                .collect()
        }
        BudgetKind::WallTime => schedule.split_seconds(total_budget)?,
    };
    let rows = schedule
        .stages
        .iter()
        .zip(budgets)
        .enumerate()
        .map(|(i, (s, budget))| {
            let (batch_size, steps) = match (schedule.budget_kind, tokens_per_batch) {
                (BudgetKind::Tokens, Some(tpb)) if tpb > 0 => {
                    (Some(tpb as usize / s.seq_len), Some(budget as u64 / tpb))
                }
                (_, Some(tpb)) if tpb > 0 => (Some(tpb as usize / s.seq_len), None),
                _ => (None, None),
            };
            PreviewRow {
                stage_index: i,
                seq_len: s.seq_len,
                budget,
                batch_size,
                steps,
            }
        })
        .collect();
    Ok(Preview {
        budget_kind: schedule.budget_kind,
        total_budget,
        rows,
        warnings: gap_warning(schedule, DEFAULT_GAP_THRESHOLD),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapWarning {
    pub from_stage: usize,
    pub from_len: usize,
    pub to_len: usize,
    pub ratio: f64,
}

impl std::fmt::Display for GapWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stage {} -> {}: length jumps {} -> {} (x{:.1}); large jumps tend to spike the loss",
            self.from_stage,
            self.from_stage + 1,
            self.from_len,
            self.to_len,
            self.ratio
        )
    }
}

/// One warning per consecutive pair whose length ratio exceeds `threshold`.
pub fn gap_warning(schedule: &Schedule, threshold: f64) -> Vec<GapWarning> {
    schedule
        .stages
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| {
            let ratio = w[1].seq_len as f64 / w[0].seq_len as f64;
            (ratio > threshold).then_some(GapWarning {
                from_stage: i,
                from_len: w[0].seq_len,
                to_len: w[1].seq_len,
                ratio,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Active(usize),
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advance {
    pub position: Position,
    /// `(from, to)` stage pairs crossed by this call, in order.
    pub transitions: Vec<(usize, usize)>,
    /// True only on the call that first reaches [`Position::Done`].
    pub finished: bool,
}

/// Tracks progress (tokens or seconds) against cumulative stage budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCursor {
    ends: Vec<f64>,
    stage: usize,
    progress: f64,
    done: bool,
}

impl ScheduleCursor {
    /// `budgets` are absolute per-stage amounts, in stage order.
    pub fn new(budgets: &[f64]) -> Result<Self> {
        if budgets.is_empty() || budgets.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Schedule("cursor needs positive stage budgets".into()));
        }
        let ends = budgets
            .iter()
            .scan(0.0, |acc, b| {
                *acc += b;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            ends,
            stage: 0,
            progress: 0.0,
            done: false,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn advance(&mut self, progress: f64) -> Result<Advance> {
        if progress < self.progress || progress.is_nan() {
            return Err(Error::Contract(format!(
                "schedule progress regressed from {} to {progress}",
                self.progress
            )));
        }
        self.progress = progress;
        let mut transitions = Vec::new();
        if self.done {
            return Ok(Advance {
                position: Position::Done,
                transitions,
                finished: false,
            });
        }
        while progress >= self.ends[self.stage] {
            if self.stage + 1 == self.ends.len() {
                self.done = true;
                return Ok(Advance {
                    position: Position::Done,
                    transitions,
                    finished: true,
                });
            }
            transitions.push((self.stage, self.stage + 1));
            self.stage += 1;
        }
        Ok(Advance {
            position: Position::Active(self.stage),
            transitions,
            finished: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_four_way_split() {
        let s = equal_shares(&[128, 256, 512, 1024], BudgetKind::WallTime).unwrap();
        let secs = s.split_seconds(1.0).unwrap();
        assert_eq!(secs, vec![0.25; 4]);
    }

    #[test]
    fn single_stage_baseline() {
        let s = build_schedule(&[1024], &[StageBudget::Share(1.0)], BudgetKind::Tokens).unwrap();
        assert_eq!(s.split_tokens(12345).unwrap(), vec![12345]);
        assert!(gap_warning(&s, DEFAULT_GAP_THRESHOLD).is_empty());
    }

    #[test]
    fn rejects_bad_schedules() {
        let sh = [StageBudget::Share(0.5), StageBudget::Share(0.5)];
        assert!(matches!(build_schedule(&[512, 128], &sh, BudgetKind::Tokens), Err(Error::Schedule(_))));
        assert!(matches!(build_schedule(&[128, 128], &sh, BudgetKind::Tokens), Err(Error::Schedule(_))));
        assert!(matches!(build_schedule(&[128], &sh, BudgetKind::Tokens), Err(Error::Config(_))));
        let bad = [StageBudget::Share(0.5), StageBudget::Share(0.4)];
        assert!(matches!(build_schedule(&[1, 2], &sh, BudgetKind::Tokens), Err(Error::Schedule(_))));
        assert!(matches!(build_schedule(&[128, 256], &bad, BudgetKind::WallTime), Err(Error::Config(_))));
        let mixed = [StageBudget::Share(0.5), StageBudget::Tokens(5)];
        assert!(matches!(build_schedule(&[128, 256], &mixed, BudgetKind::Tokens), Err(Error::Config(_))));
        let abs = [StageBudget::Tokens(5), StageBudget::Tokens(5)];
        assert!(matches!(build_schedule(&[128, 256], &abs, BudgetKind::WallTime), Err(Error::Config(_))));
    }

    #[test]
    fn even_token_preview() {
        let s = equal_shares(&[128, 1024], BudgetKind::Tokens).unwrap();
        let p = preview(&s, 1_000_000.0, Some(16384)).unwrap();
        assert_eq!(p.rows[0].budget, 500_000.0);
        assert_eq!(p.rows[1].budget, 500_000.0);
        assert_eq!(p.rows[0].steps, Some(500_000 / 16384));
        assert_eq!(p.rows[0].batch_size, Some(128));
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn thirds_conserve_total() {
        let s = equal_shares(&[32, 64, 128], BudgetKind::Tokens).unwrap();
        let t = s.split_tokens(100).unwrap();
        assert_eq!(t.iter().sum::<u64>(), 100);
        assert_eq!(t, vec![33, 33, 34]);
    }

    #[test]
    fn steps_align_to_batches() {
        let s = equal_shares(&[32, 64, 128], BudgetKind::Tokens).unwrap();
        assert_eq!(s.split_steps(10 * 256, 256).unwrap(), vec![3, 3, 4]);
        assert!(s.split_steps(1000, 256).is_err());
    }

    #[test]
    fn gap_lint() {
        let gradual = equal_shares(&[128, 256, 512, 1024], BudgetKind::Tokens).unwrap();
        assert!(gap_warning(&gradual, DEFAULT_GAP_THRESHOLD).is_empty());
        let ratio4 = equal_shares(&[128, 512], BudgetKind::Tokens).unwrap();
        assert!(gap_warning(&ratio4, DEFAULT_GAP_THRESHOLD).is_empty());
        let jump = equal_shares(&[128, 1024], BudgetKind::Tokens).unwrap();
        let w = gap_warning(&jump, DEFAULT_GAP_THRESHOLD);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].ratio, 8.0);
    }

    #[test]
    fn cursor_walks_stages() {
        let mut c = ScheduleCursor::new(&[10.0, 10.0]).unwrap();
        assert_eq!(c.advance(0.0).unwrap().position, Position::Active(0));
        let a = c.advance(12.0).unwrap();
        assert_eq!(a.transitions, vec![(0, 1)]);
        assert_eq!(a.position, Position::Active(1));
        assert!(c.advance(15.0).unwrap().transitions.is_empty());
        let d = c.advance(25.0).unwrap();
        assert!(d.finished);
        let again = c.advance(30.0).unwrap();
        assert_eq!(again.position, Position::Done);
        assert!(!again.finished);
        assert!(matches!(c.advance(29.0), Err(Error::Contract(_))));
    }
}
