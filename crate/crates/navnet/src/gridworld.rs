//! Grid-maze environments: procedural generation, robot poses, the
//! four-neighbor binary observation, and deterministic step dynamics.
//!
//! A maze is an `M × N` cell grid (x runs over columns, y over rows) with a
//! border ring of walls, optional interior walls, and optional furniture.
//! Furniture is always visible to the robot's proximity sensor but its
//! blocking behavior and map presence depend on the task variant:
//!
//! * variant A — furniture is see-through-able in the motion sense: the robot
//!   may drive through it, and it does not appear on the floor map;
//! * variant B — furniture blocks movement and is drawn on the floor map;
//! * variant C — furniture blocks movement but the floor map shows walls
//!   only, so the robot must discover it through observations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Orientations: 0 = north (−y), 1 = east (+x), 2 = south (+y), 3 = west (−x).
pub const NUM_ORIENTATIONS: usize = 4;
/// Actions: forward, turn left, turn right, stay.
pub const NUM_ACTIONS: usize = 4;

/// Per-orientation unit steps, indexed by orientation: (dx, dy).
const ORIENT_STEP: [(isize, isize); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("maze generation failed: {0}")]
    Generation(String),
    #[error("no feasible start/goal pair: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Forward = 0,
    TurnLeft = 1,
    TurnRight = 2,
    Stay = 3,
}

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] =
        [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stay];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskVariant {
    A,
    B,
    C,
}

impl TaskVariant {
    /// Whether furniture stops a forward move (and invalidates poses on it).
    pub fn furniture_blocks(self) -> bool {
        !matches!(self, TaskVariant::A)
    }

    /// Whether furniture appears on the floor map handed to a planner.
    pub fn furniture_on_map(self) -> bool {
        matches!(self, TaskVariant::B)
    }

    pub fn letter(self) -> char {
        match self {
            TaskVariant::A => 'A',
            TaskVariant::B => 'B',
            TaskVariant::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<TaskVariant> {
        match c {
            'A' | 'a' => Some(TaskVariant::A),
            'B' | 'b' => Some(TaskVariant::B),
            'C' | 'c' => Some(TaskVariant::C),
            _ => None,
        }
    }
}

/// A robot configuration: grid cell plus facing direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub theta: usize,
}

impl Pose {
    pub fn new(x: usize, y: usize, theta: usize) -> Pose {
        debug_assert!(theta < NUM_ORIENTATIONS);
        Pose { x, y, theta }
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.x, self.y)
    }
}

/// The four occupancy bits around the robot, in robot frame:
/// bit 0 = ahead, 1 = right, 2 = behind, 3 = left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryObs {
    bits: [bool; 4],
}

impl BinaryObs {
    pub fn new(bits: [bool; 4]) -> BinaryObs {
        BinaryObs { bits }
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Packs the bits into 0..16, bit `i` at weight `1 << i`.
    pub fn code(&self) -> u8 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| acc | ((b as u8) << i))
    }

    pub fn from_code(code: u8) -> BinaryObs {
        BinaryObs { bits: [code & 1 != 0, code & 2 != 0, code & 4 != 0, code & 8 != 0] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Maze {
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    furniture: Vec<bool>,
    pub goal: (usize, usize),
    pub seed: u64,
}

impl Maze {
    /// Builds a maze from explicit occupancy data (dataset loading, tests).
    pub fn from_parts(
        width: usize,
        height: usize,
        walls: Vec<bool>,
        furniture: Vec<bool>,
        goal: (usize, usize),
        seed: u64,
    ) -> Result<Maze, GridError> {
        if walls.len() != width * height || furniture.len() != width * height {
            return Err(GridError::Generation(format!(
                "occupancy length does not match {}x{}",
                width, height
            )));
        }
        if goal.0 >= width || goal.1 >= height {
            return Err(GridError::Generation("goal out of bounds".into()));
        }
        let m = Maze { width, height, walls, furniture, goal, seed };
        if m.wall(goal.0, goal.1) || m.furniture(goal.0, goal.1) {
            return Err(GridError::Generation("goal cell is occupied".into()));
        }
        Ok(m)
    }

    fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    pub fn wall(&self, x: usize, y: usize) -> bool {
        self.walls[self.idx(x, y)]
    }

    pub fn furniture(&self, x: usize, y: usize) -> bool {
        self.furniture[self.idx(x, y)]
    }

    /// What the proximity sensor reports: walls and furniture alike, in every
    /// task variant.
    pub fn sensed_occupied(&self, x: usize, y: usize) -> bool {
        self.wall(x, y) || self.furniture(x, y)
    }

    /// Whether a forward move into this cell is stopped under the variant.
    pub fn blocks(&self, x: usize, y: usize, variant: TaskVariant) -> bool {
        self.wall(x, y) || (variant.furniture_blocks() && self.furniture(x, y))
    }

    /// Cells free of both walls and furniture — legal start/goal cells in
    /// every variant.
    pub fn cell_free(&self, x: usize, y: usize) -> bool {
        !self.wall(x, y) && !self.furniture(x, y)
    }

    pub fn walls_row_major(&self) -> &[bool] {
        &self.walls
    }

    pub fn furniture_row_major(&self) -> &[bool] {
        &self.furniture
    }

    /// All cells free of walls and furniture, row-major order.
    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.cell_free(x, y) {
                    cells.push((x, y));
                }
            }
        }
        cells
    }
}

/// The binary occupancy image a policy receives: walls only for variants A
/// and C, walls plus furniture for variant B. Row-major, `true` = occupied.
pub fn floor_map(maze: &Maze, variant: TaskVariant) -> Vec<bool> {
    maze.walls
        .iter()
        .zip(&maze.furniture)
        .map(|(&w, &f)| w || (variant.furniture_on_map() && f))
        .collect()
}

/// The neighbor cell one step in `theta` direction, `None` when off-grid.
pub fn neighbor(width: usize, height: usize, x: usize, y: usize, theta: usize) -> Option<(usize, usize)> {
    let (dx, dy) = ORIENT_STEP[theta];
    let nx = x as isize + dx;
    let ny = y as isize + dy;
    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
        None
    } else {
        Some((nx as usize, ny as usize))
    }
}

/// The four-neighbor proximity reading at a pose. Bit `i` looks in world
/// direction `(theta + i) mod 4`, so the vector is in robot frame: ahead,
/// right, behind, left. Off-grid reads as occupied. Furniture is sensed in
/// every variant, so the reading needs no variant argument.
pub fn render_observation(maze: &Maze, pose: &Pose) -> BinaryObs {
    let mut bits = [false; 4];
    for (i, bit) in bits.iter_mut().enumerate() {
        let dir = (pose.theta + i) % NUM_ORIENTATIONS;
        *bit = match neighbor(maze.width, maze.height, pose.x, pose.y, dir) {
            Some((nx, ny)) => maze.sensed_occupied(nx, ny),
            None => true,
        };
    }
    BinaryObs::new(bits)
}

/// One tick of the world. Turns and stay always succeed; forward moves one
/// cell along the facing direction unless the target blocks under the
/// variant, in which case the robot stays put and the move counts as a
/// collision.
pub fn step_dynamics(
    maze: &Maze,
    pose: &Pose,
    action: Action,
    variant: TaskVariant,
) -> (Pose, bool) {
    match action {
        Action::Stay => (*pose, false),
        Action::TurnLeft => (Pose::new(pose.x, pose.y, (pose.theta + 3) % 4), false),
        Action::TurnRight => (Pose::new(pose.x, pose.y, (pose.theta + 1) % 4), false),
        Action::Forward => {
            match neighbor(maze.width, maze.height, pose.x, pose.y, pose.theta) {
                Some((nx, ny)) if !maze.blocks(nx, ny, variant) => {
                    (Pose::new(nx, ny, pose.theta), false)
                }
                _ => (*pose, true),
            }
        }
    }
}

/// 4-connected reachability over cells passing `open`.
fn flood_fill(width: usize, height: usize, open: &dyn Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; width * height];
    let mut stack = Vec::new();
    let mut total = 0;
    'outer: for y in 0..height {
        for x in 0..width {
            if open(x, y) {
                stack.push((x, y));
                seen[y * width + x] = true;
                total = 1;
                break 'outer;
            }
        }
    }
    if stack.is_empty() {
        return false; // nothing open at all
    }
    while let Some((x, y)) = stack.pop() {
        for dir in 0..4 {
            if let Some((nx, ny)) = neighbor(width, height, x, y, dir) {
                if open(nx, ny) && !seen[ny * width + nx] {
                    seen[ny * width + nx] = true;
                    total += 1;
                    stack.push((nx, ny));
                }
            }
        }
    }
    let open_count = (0..height)
        .flat_map(|y| (0..width).map(move |x| (x, y)))
        .filter(|&(x, y)| open(x, y))
        .count();
    total == open_count
}

/// Generates a maze: border ring of walls, interior walls sampled at
/// `wall_density` with whole-pattern rejection until the free space is
/// 4-connected, then `furniture_count` pieces placed one by one, each
/// rejected if it would disconnect the remaining free cells. The goal is
/// drawn uniformly from the free cells. Identical seeds give identical
/// mazes.
pub fn generate_maze(
    seed: u64,
    width: usize,
    height: usize,
    wall_density: f64,
    furniture_count: usize,
) -> Result<Maze, GridError> {
    use rand::SeedableRng;
    if width < 5 || height < 5 {
        return Err(GridError::Generation(format!(
            "grid {}x{} is below the 5x5 minimum",
            width, height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let border = |x: usize, y: usize| x == 0 || y == 0 || x == width - 1 || y == height - 1;

    let mut walls = vec![false; width * height];
    let mut attempts = 0;
    loop {
        attempts += 1;
        if attempts > 100 {
            return Err(GridError::Generation(format!(
                "no connected wall pattern at density {} after 100 attempts",
                wall_density
            )));
        }
        for y in 0..height {
            for x in 0..width {
                walls[y * width + x] =
                    border(x, y) || rng.gen_bool(wall_density.clamp(0.0, 1.0));
            }
        }
        let w = walls.clone();
        if flood_fill(width, height, &|x, y| !w[y * width + x]) {
            break;
        }
    }

    let mut furniture = vec![false; width * height];
    let mut placed = 0;
    let mut rejections = 0;
    let budget = 100 * furniture_count.max(1);
    while placed < furniture_count {
        if rejections >= budget {
            return Err(GridError::Generation(format!(
                "placed {placed}/{furniture_count} furniture pieces before exhausting \
                 {budget} rejection samples"
            )));
        }
        let x = rng.gen_range(1..width - 1);
        let y = rng.gen_range(1..height - 1);
        let i = y * width + x;
        if walls[i] || furniture[i] {
            rejections += 1;
            continue;
        }
        furniture[i] = true;
        let (w, f) = (walls.clone(), furniture.clone());
        let still_connected = flood_fill(width, height, &|x, y| {
            !w[y * width + x] && !f[y * width + x]
        });
        if still_connected {
            placed += 1;
        } else {
            furniture[i] = false;
            rejections += 1;
        }
    }

    let free: Vec<usize> = (0..width * height)
        .filter(|&i| !walls[i] && !furniture[i])
        .collect();
    if free.is_empty() {
        return Err(GridError::Generation("no free cell left for the goal".into()));
    }
    let gi = free[rng.gen_range(0..free.len())];
    let goal = (gi % width, gi / width);
    Ok(Maze { width, height, walls, furniture, goal, seed })
}

/// Draws an episode's start pose and goal cell: start uniform over free
/// cells × orientations, goal uniform over free cells, rejecting pairs
/// closer than `min_manhattan` (and identical cells) up to 1000 times.
pub fn sample_start_goal(
    maze: &Maze,
    rng: &mut ChaCha8Rng,
    min_manhattan: usize,
) -> Result<(Pose, (usize, usize)), GridError> {
    let free = maze.free_cells();
    if free.len() < 2 {
        return Err(GridError::Infeasible("fewer than 2 free cells".into()));
    }
    for _ in 0..1000 {
        let (sx, sy) = free[rng.gen_range(0..free.len())];
        let theta = rng.gen_range(0..NUM_ORIENTATIONS);
        let (gx, gy) = free[rng.gen_range(0..free.len())];
        let dist = sx.abs_diff(gx) + sy.abs_diff(gy);
        if (sx, sy) != (gx, gy) && dist >= min_manhattan {
            return Ok((Pose::new(sx, sy, theta), (gx, gy)));
        }
    }
    Err(GridError::Infeasible(format!(
        "no start/goal pair at distance >= {} in 1000 draws",
        min_manhattan
    )))
}

/// Fewest actions (forward/turn each cost 1) from `start` to any orientation
/// at `goal`, by breadth-first search over (cell, orientation). `None` when
/// unreachable. This is the exact lower bound on episode length.
pub fn shortest_path_steps(
    maze: &Maze,
    variant: TaskVariant,
    start: &Pose,
    goal: (usize, usize),
) -> Option<usize> {
    use std::collections::VecDeque;
    if start.cell() == goal {
        return Some(0);
    }
    let states = maze.width * maze.height * NUM_ORIENTATIONS;
    let id = |p: &Pose| (p.y * maze.width + p.x) * NUM_ORIENTATIONS + p.theta;
    let mut dist = vec![usize::MAX; states];
    let mut queue = VecDeque::new();
    dist[id(start)] = 0;
    queue.push_back(*start);
    while let Some(p) = queue.pop_front() {
        let d = dist[id(&p)];
        for action in [Action::Forward, Action::TurnLeft, Action::TurnRight] {
            let (next, collided) = step_dynamics(maze, &p, action, variant);
            if collided || dist[id(&next)] != usize::MAX {
                continue;
            }
            if next.cell() == goal {
                return Some(d + 1);
            }
            dist[id(&next)] = d + 1;
            queue.push_back(next);
        }
    }
    None
}
