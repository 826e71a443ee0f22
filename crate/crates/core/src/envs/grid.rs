//! Risky mini-grid: a shortest-path task whose bonus cells pay a large
//! stochastic reward, making the whole-trajectory risk optimum diverge
//! from per-state risk-greedy behavior.
//!
//! Cell alphabet: `S` start, `G` goal, `Y` stochastic bonus (pays once),
//! `B` sure bonus (pays once), `O` heavy penalty, `.` empty. The grid
//! state is the pair (cell, collected-bitmask), so each Y/B cell can pay
//! only once per episode.

use crate::dist::ReturnDistribution;
use crate::envs::{EnvError, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridCell {
    Start,
    Goal,
    Yellow,
    Blue,
    Orange,
    Empty,
}

/// Movement set: the reduced two-action grid keeps exact DP small; the
/// four-action variant is for learned agents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridActionSet {
    RightDown,
    Cardinal,
}

impl GridActionSet {
    fn moves(self) -> &'static [(isize, isize)] {
        match self {
            GridActionSet::RightDown => &[(0, 1), (1, 0)],
            GridActionSet::Cardinal => &[(0, 1), (1, 0), (0, -1), (-1, 0)],
        }
    }

    fn labels(self) -> Vec<String> {
        match self {
            GridActionSet::RightDown => vec!["right".into(), "down".into()],
            GridActionSet::Cardinal => {
                vec!["right".into(), "down".into(), "left".into(), "up".into()]
            }
        }
    }
}

/// A rectangular grid map plus its reward parameters.
#[derive(Debug, Clone)]
pub struct GridLayout {
    pub cells: Vec<Vec<GridCell>>,
    /// Success probability of a yellow bonus.
    pub bonus_prob: f64,
    pub bonus_value: f64,
    pub blue_value: f64,
    pub orange_penalty: f64,
    pub step_penalty: f64,
}

impl GridLayout {
    /// Parses a map from text, one row per line.
    pub fn parse(text: &str) -> Result<Self, EnvError> {
        let mut cells = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for ch in line.chars() {
                row.push(match ch {
                    'S' => GridCell::Start,
                    'G' => GridCell::Goal,
                    'Y' => GridCell::Yellow,
                    'B' => GridCell::Blue,
                    'O' => GridCell::Orange,
                    '.' => GridCell::Empty,
                    other => {
                        return Err(EnvError::BadLayout(format!(
                            "line {}: unknown cell '{other}'",
                            ln + 1
                        )))
                    }
                });
            }
            cells.push(row);
        }
        let layout = Self {
            cells,
            bonus_prob: 0.75,
            bonus_value: 100.0,
            blue_value: 20.0,
            orange_penalty: -100.0,
            step_penalty: -2.0,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// The default 4×4 map. Both yellow bonuses sit on the top route, so
    /// the two-yellow trajectory's worst case (both fail, probability
    /// 0.0625) falls below typical tail levels, while a sure blue route
    /// exists below it. Every start-to-goal path takes six moves under
    /// {right, down}.
    pub fn default_map() -> Self {
        Self::parse("SYY.\n....\nOB..\n...G").expect("static map")
    }

    fn validate(&self) -> Result<(), EnvError> {
        if self.cells.is_empty() {
            return Err(EnvError::BadLayout("empty map".into()));
        }
        let width = self.cells[0].len();
        if width == 0 {
            return Err(EnvError::BadLayout("empty row".into()));
        }
        if self.cells.iter().any(|row| row.len() != width) {
            return Err(EnvError::BadLayout("rows have unequal lengths".into()));
        }
        let count = |kind: GridCell| {
            self.cells
                .iter()
                .flatten()
                .filter(|&&c| c == kind)
                .count()
        };
        if count(GridCell::Start) != 1 {
            return Err(EnvError::BadLayout("expected exactly one S".into()));
        }
        if count(GridCell::Goal) != 1 {
            return Err(EnvError::BadLayout("expected exactly one G".into()));
        }
        if !(0.0..=1.0).contains(&self.bonus_prob) {
            return Err(EnvError::BadParam(format!(
                "bonus_prob must lie in [0,1], got {}",
                self.bonus_prob
            )));
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        self.cells.len()
    }

    fn cols(&self) -> usize {
        self.cells[0].len()
    }

    fn find(&self, kind: GridCell) -> (usize, usize) {
        for (r, row) in self.cells.iter().enumerate() {
            for (c, &cell) in row.iter().enumerate() {
                if cell == kind {
                    return (r, c);
                }
            }
        }
        unreachable!("validated layout")
    }
}

/// Builds the tabular MDP for a grid layout. States are
/// `cell_index * 2^k + bitmask` over the `k` collectible (Y/B) cells in
/// scan order; goal states are absorbing. Off-grid moves stay in place
/// and still pay the step penalty; cell-entry rewards apply only when the
/// cell changes.
pub fn risky_grid(
    layout: &GridLayout,
    gamma: f64,
    horizon: usize,
    actions: GridActionSet,
) -> Result<TabularMdp, EnvError> {
    layout.validate()?;
    let (rows, cols) = (layout.rows(), layout.cols());
    let n_cells = rows * cols;

    let mut collectible = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if matches!(layout.cells[r][c], GridCell::Yellow | GridCell::Blue) {
                collectible.push(r * cols + c);
            }
        }
    }
    let k = collectible.len();
    if k > 20 {
        return Err(EnvError::BadLayout(format!("{k} collectible cells (limit 20)")));
    }
    let n_masks = 1usize << k;
    let n_states = n_cells * n_masks;
    let moves = actions.moves();
    let n_actions = moves.len();

    let bit_of = |cell: usize| collectible.iter().position(|&c| c == cell);

    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let mut transition = vec![0usize; n_states * n_actions];
    let mut reward = vec![zero.clone(); n_states * n_actions];
    let mut terminal = vec![false; n_states];

    for cell in 0..n_cells {
        let (r, c) = (cell / cols, cell % cols);
        let cell_kind = layout.cells[r][c];
        for mask in 0..n_masks {
            let state = cell * n_masks + mask;
            if cell_kind == GridCell::Goal {
                terminal[state] = true;
                for a in 0..n_actions {
                    transition[state * n_actions + a] = state;
                }
                continue;
            }
            for (a, &(dr, dc)) in moves.iter().enumerate() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                let idx = state * n_actions + a;
                let in_bounds =
                    nr >= 0 && nc >= 0 && (nr as usize) < rows && (nc as usize) < cols;
                if !in_bounds {
                    transition[idx] = state;
                    reward[idx] = ReturnDistribution::dirac(layout.step_penalty)?;
                    continue;
                }
                let dest = nr as usize * cols + nc as usize;
                let dest_kind = layout.cells[nr as usize][nc as usize];
                let step = layout.step_penalty;
                let (next_mask, dist) = match dest_kind {
                    GridCell::Yellow => match bit_of(dest) {
                        Some(b) if mask & (1 << b) == 0 => (
                            mask | (1 << b),
                            ReturnDistribution::from_atoms([
                                (step + layout.bonus_value, layout.bonus_prob),
                                (step, 1.0 - layout.bonus_prob),
                            ])?,
                        ),
                        _ => (mask, ReturnDistribution::dirac(step)?),
                    },
                    GridCell::Blue => match bit_of(dest) {
                        Some(b) if mask & (1 << b) == 0 => (
                            mask | (1 << b),
                            ReturnDistribution::dirac(step + layout.blue_value)?,
                        ),
                        _ => (mask, ReturnDistribution::dirac(step)?),
                    },
                    GridCell::Orange => (mask, ReturnDistribution::dirac(step + layout.orange_penalty)?),
                    _ => (mask, ReturnDistribution::dirac(step)?),
                };
                transition[idx] = dest * n_masks + next_mask;
                reward[idx] = dist;
            }
        }
    }

    let (sr, sc) = layout.find(GridCell::Start);
    let start_state = (sr * cols + sc) * n_masks;
    TabularMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        terminal,
        gamma,
        horizon,
        vec![(start_state, 1.0)],
    )
    .map(|mdp| mdp.with_action_labels(actions.labels()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_map_shape() {
        let layout = GridLayout::default_map();
        let mdp = risky_grid(&layout, 1.0, 6, GridActionSet::RightDown).unwrap();
        // 16 cells, 3 collectible cells (2 yellow + 1 blue)
        assert_eq!(mdp.n_states(), 16 * 8);
        assert_eq!(mdp.n_actions(), 2);
        assert_eq!(mdp.action_label(0), "right");
        assert_eq!(mdp.action_label(1), "down");
    }

    #[test]
    fn yellow_entry_reward_is_two_atoms_once() {
        let layout = GridLayout::default_map();
        let mdp = risky_grid(&layout, 1.0, 6, GridActionSet::RightDown).unwrap();
        let start = mdp.initial()[0].0;
        // moving right from S enters the first yellow cell
        let r = mdp.reward(start, 0);
        assert_eq!(r.atoms().len(), 2);
        assert_eq!(r.atoms()[0].value, -2.0);
        assert!((r.atoms()[0].prob - 0.25).abs() < 1e-12);
        assert_eq!(r.atoms()[1].value, 98.0);

        // after collection the same entry pays only the step penalty
        let collected = mdp.transition(start, 0);
        // step back is impossible under {right,down}; check the bit stuck
        assert_ne!(collected % 8, 0);
    }

    #[test]
    fn empty_step_and_orange_entry() {
        let layout = GridLayout::parse("S.\nOG").unwrap();
        let mdp = risky_grid(&layout, 1.0, 4, GridActionSet::RightDown).unwrap();
        let start = mdp.initial()[0].0;
        assert_eq!(
            mdp.reward(start, 0),
            &ReturnDistribution::dirac(-2.0).unwrap()
        );
        assert_eq!(
            mdp.reward(start, 1),
            &ReturnDistribution::dirac(-102.0).unwrap()
        );
    }

    #[test]
    fn off_grid_moves_stay_in_place_with_penalty() {
        let layout = GridLayout::parse("S.\n.G").unwrap();
        let mdp = risky_grid(&layout, 1.0, 4, GridActionSet::Cardinal).unwrap();
        let start = mdp.initial()[0].0;
        // left and up from the corner bounce back
        assert_eq!(mdp.transition(start, 2), start);
        assert_eq!(mdp.transition(start, 3), start);
        assert_eq!(
            mdp.reward(start, 2),
            &ReturnDistribution::dirac(-2.0).unwrap()
        );
    }

    #[test]
    fn blue_pays_once() {
        let layout = GridLayout::parse("SB\n.G").unwrap();
        let mdp = risky_grid(&layout, 1.0, 8, GridActionSet::Cardinal).unwrap();
        let start = mdp.initial()[0].0;
        let after_b = mdp.transition(start, 0);
        assert_eq!(mdp.reward(start, 0), &ReturnDistribution::dirac(18.0).unwrap());
        // go back left, then re-enter: only the step penalty remains
        let back = mdp.transition(after_b, 2);
        assert_eq!(mdp.reward(back, 0), &ReturnDistribution::dirac(-2.0).unwrap());
    }

    #[test]
    fn malformed_layouts_rejected() {
        assert!(GridLayout::parse("S.\n.").is_err());
        assert!(GridLayout::parse("..\n.G").is_err());
        assert!(GridLayout::parse("SS\n.G").is_err());
        assert!(GridLayout::parse("SX\n.G").is_err());
    }
}
