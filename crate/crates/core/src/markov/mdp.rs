use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;

use super::{stationary_distribution, FiniteChain, MarkovError};

/// Outcome of taking an action: next state, probability and reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// One observed transition `(s, a, r, s′)`. `terminal` marks an `s′` that
/// ends an episode (the chain teleports to the start on the next draw).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next: usize,
    pub terminal: bool,
}

/// Finite MDP with a fixed behavior policy.
///
/// Reaching a terminal state does not end the chain: the next sample starts
/// from `start`, so the sequence of observed transitions is one ergodic
/// Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `outcomes[s][a]`
    outcomes: Vec<Vec<Vec<Outcome>>>,
    terminal: Vec<bool>,
    start: usize,
    /// `behavior[s][a]`
    behavior: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn new(
        outcomes: Vec<Vec<Vec<Outcome>>>,
        terminal: Vec<bool>,
        start: usize,
        behavior: Vec<Vec<f64>>,
    ) -> Result<Self, MarkovError> {
        let n_states = outcomes.len();
        if n_states == 0 {
            return Err(MarkovError::InvalidMdp("no states".into()));
        }
        let n_actions = outcomes[0].len();
        if n_actions == 0 {
            return Err(MarkovError::InvalidMdp("no actions".into()));
        }
        if terminal.len() != n_states || behavior.len() != n_states || start >= n_states {
            return Err(MarkovError::InvalidMdp("inconsistent state count".into()));
        }
        if terminal[start] {
            return Err(MarkovError::InvalidMdp("start state is terminal".into()));
        }
        for (s, per_action) in outcomes.iter().enumerate() {
            if per_action.len() != n_actions || behavior[s].len() != n_actions {
                return Err(MarkovError::InvalidMdp(format!(
                    "state {s} has the wrong action count"
                )));
            }
            for (a, outs) in per_action.iter().enumerate() {
                let total: f64 = outs.iter().map(|o| o.prob).sum();
                if (total - 1.0).abs() > 1e-12
                    || outs
                        .iter()
                        .any(|o| o.next >= n_states || o.prob < 0.0 || !o.reward.is_finite())
                {
                    return Err(MarkovError::InvalidMdp(format!(
                        "bad outcomes at ({s}, {a})"
                    )));
                }
            }
            let total: f64 = behavior[s].iter().sum();
            if (total - 1.0).abs() > 1e-12 || behavior[s].iter().any(|&p| p < 0.0) {
                return Err(MarkovError::InvalidMdp(format!(
                    "behavior at state {s} is not a distribution"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            outcomes,
            terminal,
            start,
            behavior,
        })
    }

    /// Single state, single action, reward `r`, self-loop.
    pub fn single_state(reward: f64) -> Self {
        Self::new(
            vec![vec![vec![Outcome {
                next: 0,
                prob: 1.0,
                reward,
            }]]],
            vec![false],
            0,
            vec![vec![1.0]],
        )
        .expect("single-state mdp is well formed")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.outcomes[s][a]
    }

    pub fn behavior(&self, s: usize) -> &[f64] {
        &self.behavior[s]
    }

    /// State from which the next action is taken, after the terminal teleport.
    pub fn effective(&self, s: usize) -> usize {
        if self.terminal[s] {
            self.start
        } else {
            s
        }
    }

    /// Chain of effective states under the behavior policy, restricted to
    /// states reachable from the start. Returns the chain and the MDP state
    /// id of each chain index.
    pub fn effective_chain(&self) -> Result<(FiniteChain, Vec<usize>), MarkovError> {
        let mut index = vec![usize::MAX; self.n_states];
        let mut ids = vec![self.start];
        index[self.start] = 0;
        let mut queue = VecDeque::from([self.start]);
        while let Some(s) = queue.pop_front() {
            for a in 0..self.n_actions {
                if self.behavior[s][a] == 0.0 {
                    continue;
                }
                for o in &self.outcomes[s][a] {
                    let t = self.effective(o.next);
                    if o.prob > 0.0 && index[t] == usize::MAX {
                        index[t] = ids.len();
                        ids.push(t);
                        queue.push_back(t);
                    }
                }
            }
        }
        let n = ids.len();
        let mut p = DMatrix::zeros(n, n);
        for (row, &s) in ids.iter().enumerate() {
            for a in 0..self.n_actions {
                let pa = self.behavior[s][a];
                for o in &self.outcomes[s][a] {
                    p[(row, index[self.effective(o.next)])] += pa * o.prob;
                }
            }
        }
        // absorb accumulated rounding into the diagonal
        for row in 0..n {
            let sum: f64 = p.row(row).iter().sum();
            p[(row, row)] += 1.0 - sum;
        }
        Ok((FiniteChain::new(p)?, ids))
    }

    /// Stationary law of observed transitions: `μ(s) π(a|s) P(s′|s,a)`.
    pub fn stationary_transitions(&self) -> Result<Vec<(f64, Transition)>, MarkovError> {
        let (chain, ids) = self.effective_chain()?;
        let mu = stationary_distribution(&chain)?;
        let mut out = Vec::new();
        for (row, &s) in ids.iter().enumerate() {
            for a in 0..self.n_actions {
                let pa = self.behavior[s][a];
                if pa == 0.0 {
                    continue;
                }
                for o in &self.outcomes[s][a] {
                    let w = mu[row] * pa * o.prob;
                    if w > 0.0 {
                        out.push((
                            w,
                            Transition {
                                state: s,
                                action: a,
                                reward: o.reward,
                                next: o.next,
                                terminal: self.terminal[o.next],
                            },
                        ));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// MDP chain with a current state.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSource {
    mdp: Arc<TabularMdp>,
    state: usize,
}

impl MdpSource {
    pub fn new(mdp: Arc<TabularMdp>) -> Self {
        let state = mdp.start;
        Self { mdp, state }
    }

    /// Places the chain in `state` (e.g. on a goal cell).
    pub fn with_state(mut self, state: usize) -> Self {
        assert!(state < self.mdp.n_states);
        self.state = state;
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn shared_mdp(&self) -> Arc<TabularMdp> {
        Arc::clone(&self.mdp)
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn sample_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Transition {
        let mdp = &self.mdp;
        let s = mdp.effective(self.state);
        let action = draw(&mdp.behavior[s], rng);
        let outs = &mdp.outcomes[s][action];
        let weights: Vec<f64> = outs.iter().map(|o| o.prob).collect();
        let o = outs[draw(&weights, rng)];
        self.state = o.next;
        Transition {
            state: s,
            action,
            reward: o.reward,
            next: o.next,
            terminal: mdp.terminal[o.next],
        }
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    if probs.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Empty,
    Obstacle,
    Goal,
    Start,
}

/// Grid moves, in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

/// Rectangular maze. Text format: one row per line, `.` empty, `#` obstacle,
/// `G` goal, `S` start.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Maze {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    start: usize,
}

impl Maze {
    pub fn parse(text: &str) -> Result<Self, MarkovError> {
        let mut cells = Vec::new();
        let mut width = None;
        let mut height = 0;
        let mut start = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r').trim();
            if line.is_empty() {
                continue;
            }
            let row: Vec<char> = line.chars().collect();
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(MarkovError::MazeParse {
                        line: lineno + 1,
                        msg: format!("row has {} cells, expected {w}", row.len()),
                    })
                }
                _ => {}
            }
            for ch in row {
                let cell = match ch {
                    '.' => Cell::Empty,
                    '#' => Cell::Obstacle,
                    'G' => Cell::Goal,
                    'S' => {
                        if start.is_some() {
                            return Err(MarkovError::MazeParse {
                                line: lineno + 1,
                                msg: "second start cell".into(),
                            });
                        }
                        start = Some(cells.len());
                        Cell::Start
                    }
                    other => {
                        return Err(MarkovError::MazeParse {
                            line: lineno + 1,
                            msg: format!("unknown cell character {other:?}"),
                        })
                    }
                };
                cells.push(cell);
            }
            height += 1;
        }
        let width = width.ok_or_else(|| MarkovError::InvalidMaze("empty maze".into()))?;
        let start = start.ok_or_else(|| MarkovError::InvalidMaze("no start cell".into()))?;
        if !cells.contains(&Cell::Goal) {
            return Err(MarkovError::InvalidMaze("no goal cell".into()));
        }
        let maze = Self {
            width,
            height,
            cells,
            start,
        };
        if maze.shortest_path_len().is_none() {
            return Err(MarkovError::InvalidMaze(
                "no goal reachable from the start".into(),
            ));
        }
        Ok(maze)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, idx: usize) -> Cell {
        self.cells[idx]
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.width, idx % self.width)
    }

    /// Cell reached by `action` from `idx`, and the reward. Moving off the
    /// grid leaves the agent in place with reward 0; moving into an obstacle
    /// leaves it in place with reward −1; entering a goal pays +1.
    pub fn step(&self, idx: usize, action: Action) -> (usize, f64) {
        let (r, c) = self.coords(idx);
        let (dr, dc) = action.delta();
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            return (idx, 0.0);
        }
        let next = nr as usize * self.width + nc as usize;
        match self.cells[next] {
            Cell::Obstacle => (idx, -1.0),
            Cell::Goal => (next, 1.0),
            _ => (next, 0.0),
        }
    }

    /// BFS distance from the start to the nearest goal.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.cells.len()];
        dist[self.start] = 0;
        let mut queue = VecDeque::from([self.start]);
        while let Some(s) = queue.pop_front() {
            if self.cells[s] == Cell::Goal {
                return Some(dist[s]);
            }
            for a in Action::ALL {
                let (t, _) = self.step(s, a);
                if dist[t] == usize::MAX {
                    dist[t] = dist[s] + 1;
                    queue.push_back(t);
                }
            }
        }
        None
    }

    /// Deterministic grid MDP over all cells with a uniform behavior policy.
    pub fn to_mdp(&self) -> TabularMdp {
        let n = self.cells.len();
        let outcomes = (0..n)
            .map(|s| {
                Action::ALL
                    .iter()
                    .map(|&a| {
                        let (next, reward) = if self.cells[s] == Cell::Obstacle {
                            (s, 0.0)
                        } else {
                            self.step(s, a)
                        };
                        vec![Outcome {
                            next,
                            prob: 1.0,
                            reward,
                        }]
                    })
                    .collect()
            })
            .collect();
        let terminal = self.cells.iter().map(|&c| c == Cell::Goal).collect();
        let behavior = vec![vec![0.25; 4]; n];
        TabularMdp::new(outcomes, terminal, self.start, behavior).expect("grid mdp is well formed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_agent_stream, Purpose};

    const MAZE5: &str = "\
S....
.#.#.
.#...
...#.
.#..G
";

    #[test]
    fn parse_and_shape() {
        let m = Maze::parse(MAZE5).unwrap();
        assert_eq!((m.width(), m.height()), (5, 5));
        assert_eq!(m.start(), 0);
        assert_eq!(m.cell(24), Cell::Goal);
        assert_eq!(m.shortest_path_len(), Some(8));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            Maze::parse("S.\n..\n"),
            Err(MarkovError::InvalidMaze(_))
        ));
        assert!(matches!(
            Maze::parse("..\n.G\n"),
            Err(MarkovError::InvalidMaze(_))
        ));
        assert!(matches!(
            Maze::parse("S.\n.\n"),
            Err(MarkovError::MazeParse { line: 2, .. })
        ));
        assert!(matches!(
            Maze::parse("Sx\n.G\n"),
            Err(MarkovError::MazeParse { line: 1, .. })
        ));
        assert!(matches!(
            Maze::parse("S#\n#G\n"),
            Err(MarkovError::InvalidMaze(_))
        ));
    }

    #[test]
    fn movement_rules() {
        let m = Maze::parse(MAZE5).unwrap();
        assert_eq!(m.step(0, Action::Up), (0, 0.0));
        assert_eq!(m.step(5, Action::Right), (5, -1.0));
        assert_eq!(m.step(23, Action::Right), (24, 1.0));
    }

    #[test]
    fn goal_teleports_to_start() {
        let m = Maze::parse("SG\n").unwrap();
        let mut src = MdpSource::new(Arc::new(m.to_mdp())).with_state(1);
        let mut rng = derive_agent_stream(0, 0, Purpose::Sampling);
        let t = src.sample_step(&mut rng);
        assert_eq!(t.state, 0);
    }

    #[test]
    fn uniform_walk_visits_every_free_cell() {
        let m = Maze::parse(MAZE5).unwrap();
        let mut src = MdpSource::new(Arc::new(m.to_mdp()));
        let mut rng = derive_agent_stream(9, 0, Purpose::Sampling);
        let mut seen = vec![false; m.n_cells()];
        for _ in 0..100_000 {
            let t = src.sample_step(&mut rng);
            seen[t.state] = true;
            seen[t.next] = true;
        }
        for (idx, &v) in seen.iter().enumerate() {
            assert_eq!(v, m.cell(idx) != Cell::Obstacle, "cell {idx}");
        }
    }

    #[test]
    fn effective_chain_is_ergodic() {
        let m = Maze::parse(MAZE5).unwrap();
        let (chain, ids) = m.to_mdp().effective_chain().unwrap();
        chain.check_ergodic().unwrap();
        // 25 cells − 5 obstacles − 1 goal
        assert_eq!(ids.len(), 19);
        let law = m.to_mdp().stationary_transitions().unwrap();
        let total: f64 = law.iter().map(|(p, _)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
