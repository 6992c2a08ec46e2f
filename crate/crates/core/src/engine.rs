//! Time stepping, force injection and rollouts.

use serde::{Deserialize, Serialize};

use crate::hierarchy::{build_hierarchy, Hierarchy};
use crate::io::scene_hash;
use crate::propagation::propagate_recursive;
use crate::providers::{GradientProvider, ProviderInput};
use crate::splat::SceneTemplate;
use crate::{Error, Mat3, Result, Vec3};

/// Default frame interval: 50 frames per second.
pub const DEFAULT_DT: f64 = 1.0 / 50.0;

/// Kernel state at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSlice {
    pub positions: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    /// Accumulated color rotations.
    pub rotations: Vec<Mat3>,
    /// Node positions for levels `0..=L`.
    pub level_positions: Vec<Vec<Vec3>>,
}

impl StateSlice {
    fn template(scene: &SceneTemplate, h: &Hierarchy) -> Self {
        Self {
            positions: scene.positions(),
            covariances: scene.kernels.iter().map(|k| k.covariance).collect(),
            rotations: vec![Mat3::identity(); scene.len()],
            level_positions: h.template_positions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub current: StateSlice,
    pub previous: StateSlice,
    /// Node positions at `t − 2`, for the acceleration feature.
    pub earlier: Vec<Vec<Vec3>>,
    pub step: u64,
    pub dt: f64,
}

impl SimState {
    pub fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }
}

/// Both slices at the template (zero velocity), or `x_{−1}` from `previous`.
/// With an override the slice before it is extrapolated linearly.
pub fn bootstrap(scene: &SceneTemplate, h: &Hierarchy, dt: f64, previous: Option<&[Vec3]>) -> Result<SimState> {
    scene.validate()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if h.kernel_count() != scene.len() {
        return Err(Error::shape("hierarchy does not match the scene"));
    }
    let current = StateSlice::template(scene, h);
    let mut prev = current.clone();
    let mut earlier = current.level_positions.clone();
    if let Some(x) = previous {
        if x.len() != scene.len() {
            return Err(Error::shape(format!(
                "x_-1 override has {} positions for {} kernels",
                x.len(),
                scene.len()
            )));
        }
        if x.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("x_-1 override".into()));
        }
        prev.positions = x.to_vec();
        prev.level_positions = h.barycenters(x);
        earlier = prev
            .level_positions
            .iter()
            .zip(&current.level_positions)
            .map(|(p, c)| p.iter().zip(c).map(|(a, b)| a * 2.0 - b).collect())
            .collect();
    }
    Ok(SimState {
        current,
        previous: prev,
        earlier,
        step: 0,
        dt,
    })
}

/// State at `step` from recorded kernel positions at `step`, `step − 1` and
/// `step − 2`. Covariances and rotations restart at the template and are
/// recomputed by the first step.
pub fn resume(
    scene: &SceneTemplate,
    h: &Hierarchy,
    dt: f64,
    step: u64,
    history: [&[Vec3]; 3],
) -> Result<SimState> {
    let mut s = bootstrap(scene, h, dt, None)?;
    let [cur, prev, early] = history;
    if [cur, prev, early].iter().any(|x| x.len() != scene.len()) {
        return Err(Error::shape("history does not match the scene"));
    }
    s.current.positions = cur.to_vec();
    s.current.level_positions = h.barycenters(cur);
    s.previous.positions = prev.to_vec();
    s.previous.level_positions = h.barycenters(prev);
    s.earlier = h.barycenters(early);
    s.step = step;
    Ok(s)
}

/// Advances one step:`G_{t+1} = propagate(ψ(G_t, G_{t−1}))` against the template.
pub fn step(state: &SimState, h: &Hierarchy, provider: &dyn GradientProvider, scene: &SceneTemplate) -> Result<SimState> {
    let run = || -> Result<SimState> {
        let input = ProviderInput::new(
            h,
            state.step,
            state.dt,
            &state.current.level_positions,
            &state.previous.level_positions,
            &state.earlier,
        )?;
        let fields = provider.predict(&input)?;
        let r = propagate_recursive(h, &fields, scene)?;
        Ok(SimState {
            current: StateSlice {
                positions: r.positions,
                covariances: r.covariances,
                rotations: r.rotations,
                level_positions: r.level_positions,
            },
            previous: state.current.clone(),
            earlier: state.previous.level_positions.clone(),
            step: state.step + 1,
            dt: state.dt,
        })
    };
    run().map_err(|e| e.at_step(state.step))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceEvent {
    pub kernel_ids: Vec<usize>,
    /// Force in mass·length/time².
    pub force: Vec3,
    /// Applied to the state at this step, before it advances.
    pub step: u64,
}

/// `Δx = ½ (f/m) dt²`.
pub fn force_displacement(force: &Vec3, mass: f64, dt: f64) -> Vec3 {
    force * 0.5 / mass * dt * dt
}

/// Displaces the selected kernels of the current slice and refreshes the CMS
/// barycenters. Covariances and rotations are left alone.
pub fn apply_force(state: &SimState, event: &ForceEvent, h: &Hierarchy) -> Result<SimState> {
    if event.kernel_ids.is_empty() {
        return Err(Error::invalid("empty selection"));
    }
    if !event.force.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("force".into()));
    }
    let kernels = h.level(0);
    if let Some(bad) = event.kernel_ids.iter().find(|&&k| k >= kernels.len()) {
        return Err(Error::invalid(format!("unknown kernel id {bad}")));
    }
    let mut next = state.clone();
    if event.force == Vec3::zeros() {
        return Ok(next);
    }
    for &k in &event.kernel_ids {
        next.current.positions[k] += force_displacement(&event.force, kernels[k].mass, state.dt);
    }
    next.current.level_positions = h.barycenters(&next.current.positions);
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub index: u64,
    pub time: f64,
    pub positions: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    /// SHA-256 of the scene's binary encoding.
    pub scene_hash: [u8; 32],
    pub frames: Vec<TrajectoryFrame>,
}

impl Trajectory {
    pub fn kernel_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.positions.len())
    }
}

fn frame_of(state: &SimState) -> TrajectoryFrame {
    TrajectoryFrame {
        index: state.step,
        time: state.time(),
        positions: state.current.positions.clone(),
    }
}

/// Runs `steps` steps, applying scheduled forces when their step comes up.
/// Returns the recorded trajectory (`steps + 1` frames) and the final state.
pub fn rollout(
    state: &SimState,
    h: &Hierarchy,
    scene: &SceneTemplate,
    provider: &dyn GradientProvider,
    steps: usize,
    forces: &[ForceEvent],
) -> Result<(Trajectory, SimState)> {
    if steps == 0 {
        return Err(Error::invalid("rollout needs at least one step"));
    }
    if let Some(f) = forces.iter().find(|f| f.step < state.step) {
        return Err(Error::invalid(format!(
            "force scheduled for past step {} (rollout starts at {})",
            f.step, state.step
        )));
    }
    let mut schedule: Vec<&ForceEvent> = forces.iter().collect();
    schedule.sort_by_key(|f| f.step);
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(frame_of(state));
    let mut s = state.clone();
    let mut next_force = 0;
    for _ in 0..steps {
        while next_force < schedule.len() && schedule[next_force].step == s.step {
            s = apply_force(&s, schedule[next_force], h)?;
            next_force += 1;
        }
        s = step(&s, h, provider, scene)?;
        frames.push(frame_of(&s));
    }
    Ok((
        Trajectory {
            dt: state.dt,
            scene_hash: scene_hash(scene),
            frames,
        },
        s,
    ))
}

/// One simulation: scene, hierarchy, provider and the current state.
pub struct Engine {
    pub scene: SceneTemplate,
    pub hierarchy: Hierarchy,
    pub provider: Box<dyn GradientProvider>,
    pub state: SimState,
}

impl Engine {
    pub fn new(scene: SceneTemplate, radii: &[f64], dt: f64, provider: Box<dyn GradientProvider>) -> Result<Self> {
        let hierarchy = build_hierarchy(&scene, radii)?;
        let state = bootstrap(&scene, &hierarchy, dt, None)?;
        Ok(Self {
            scene,
            hierarchy,
            provider,
            state,
        })
    }

    pub fn step(&mut self) -> Result<()> {
        self.state = step(&self.state, &self.hierarchy, self.provider.as_ref(), &self.scene)?;
        Ok(())
    }

    pub fn apply_force(&mut self, kernel_ids: Vec<usize>, force: Vec3) -> Result<()> {
        let event = ForceEvent {
            kernel_ids,
            force,
            step: self.state.step,
        };
        self.state = apply_force(&self.state, &event, &self.hierarchy)?;
        Ok(())
    }

    pub fn reset(&mut self) -> Result<()> {
        self.state = bootstrap(&self.scene, &self.hierarchy, self.state.dt, None)?;
        Ok(())
    }

    pub fn set_provider(&mut self, provider: Box<dyn GradientProvider>) {
        self.provider = provider;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::PolarSvdGradient;
    use crate::propagation::{identity_fields, LevelDeformationField};
    use crate::providers::features::node_features;
    use crate::providers::IdentityProvider;
    use crate::synth::{generate_synthetic_scene, SceneShape, SynthSpec};

    fn setup() -> (SceneTemplate, Hierarchy) {
        let scene = generate_synthetic_scene(&SynthSpec { shape: SceneShape::Beam, count: 250, spacing: 0.02, seed: 4 }).unwrap();
        let h = build_hierarchy(&scene, &[0.04, 0.5]).unwrap();
        (scene, h)
    }

    #[test]
    fn default_bootstrap_is_static() {
        let (scene, h) = setup();
        let s = bootstrap(&scene, &h, DEFAULT_DT, None).unwrap();
        assert_eq!(s.current, s.previous);
        assert_eq!(s.current.positions, scene.positions());
        assert!(bootstrap(&scene, &h, 0.0, None).is_err());
        assert!(bootstrap(&scene, &h, 0.02, Some(&[Vec3::zeros()])).is_err());
    }

    #[test]
    fn override_velocity_is_recovered() {
        let (scene, h) = setup();
        let v = Vec3::new(0.2, -0.1, 0.05);
        let dt = 0.02;
        let x_prev: Vec<Vec3> = scene.positions().iter().map(|p| p - v * dt).collect();
        let s = bootstrap(&scene, &h, dt, Some(&x_prev)).unwrap();
        // node velocity from the history and zero acceleration
        for l in 0..=2 {
            for (c, p) in s.current.level_positions[l].iter().zip(&s.previous.level_positions[l]) {
                assert!(((c - p) / dt - v).amax() < 1e-9);
            }
        }
        let input = ProviderInput::new(&h, 0, dt, &s.current.level_positions, &s.previous.level_positions, &s.earlier).unwrap();
        for f in node_features(&input, 1).unwrap() {
            assert!(f.cms_acceleration.amax() < 1e-6);
        }
    }

    #[test]
    fn identity_step_only_advances_time() {
        let (scene, h) = setup();
        let s0 = bootstrap(&scene, &h, DEFAULT_DT, None).unwrap();
        let s1 = step(&s0, &h, &IdentityProvider, &scene).unwrap();
        assert_eq!(s1.step, 1);
        assert_eq!(s1.current, s0.current);
        let again = step(&s0, &h, &IdentityProvider, &scene).unwrap();
        assert_eq!(s1, again);
    }

    struct Fixed(Vec<LevelDeformationField>);
    impl GradientProvider for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn predict(&self, _: &ProviderInput) -> Result<Vec<LevelDeformationField>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn step_equals_direct_propagation() {
        let (scene, h) = setup();
        let mut fields = identity_fields(&h);
        fields[0].gradients[3] = PolarSvdGradient::rotation(&Vec3::z(), 0.3);
        fields[1].gradients[1] = PolarSvdGradient::stretch(Vec3::new(1.1, 0.95, 1.0));
        let s0 = bootstrap(&scene, &h, DEFAULT_DT, None).unwrap();
        let s1 = step(&s0, &h, &Fixed(fields.clone()), &scene).unwrap();
        let direct = propagate_recursive(&h, &fields, &scene).unwrap();
        assert_eq!(s1.current.positions, direct.positions);
        assert_eq!(s1.current.covariances, direct.covariances);
    }

    #[test]
    fn errors_carry_step_index() {
        let (scene, h) = setup();
        let mut s = bootstrap(&scene, &h, DEFAULT_DT, None).unwrap();
        s.step = 41;
        let bad = Fixed(vec![]);
        match step(&s, &h, &bad, &scene) {
            Err(Error::Step { step: 41, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn force_formula() {
        let d = force_displacement(&Vec3::new(0.0, 0.0, -9.8), 2.0, 0.02);
        assert_eq!(d, Vec3::new(0.0, 0.0, -0.00098));
        let d2 = force_displacement(&Vec3::new(0.0, 0.0, -9.8), 2.0, 0.04);
        assert!((d2.norm() / d.norm() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn apply_force_moves_selected_kernels() {
        let (scene, h) = setup();
        let s = bootstrap(&scene, &h, 0.02, None).unwrap();
        let ev = ForceEvent { kernel_ids: vec![5, 9], force: Vec3::new(1.0, 0.0, 0.0), step: 0 };
        let out = apply_force(&s, &ev, &h).unwrap();
        for k in 0..scene.len() {
            let moved = out.current.positions[k] - s.current.positions[k];
            if k == 5 || k == 9 {
                let want = force_displacement(&ev.force, h.level(0)[k].mass, 0.02);
                assert!((moved - want).amax() < 1e-15);
            } else {
                assert_eq!(moved, Vec3::zeros());
            }
        }
        assert_eq!(out.current.covariances, s.current.covariances);
        assert_eq!(out.current.level_positions, h.barycenters(&out.current.positions));
        let zero = ForceEvent { force: Vec3::zeros(), ..ev.clone() };
        assert_eq!(apply_force(&s, &zero, &h).unwrap(), s);
        let unknown = ForceEvent { kernel_ids: vec![10_000], ..ev.clone() };
        assert!(apply_force(&s, &unknown, &h).is_err());
        let empty = ForceEvent { kernel_ids: vec![], ..ev };
        assert!(apply_force(&s, &empty, &h).is_err());
    }

    #[test]
    fn rollout_shapes() {
        let (scene, h) = setup();
        let s = bootstrap(&scene, &h, 0.02, None).unwrap();
        assert!(rollout(&s, &h, &scene, &IdentityProvider, 0, &[]).is_err());
        let (t, _) = rollout(&s, &h, &scene, &IdentityProvider, 1, &[]).unwrap();
        assert_eq!(t.frames.len(), 2);
        let (t, end) = rollout(&s, &h, &scene, &IdentityProvider, 10, &[]).unwrap();
        assert_eq!(end.step, 10);
        assert!(t.frames.iter().all(|f| f.positions == scene.positions()));
        assert_eq!(t.frames[3].index, 3);
        let mut later = s.clone();
        later.step = 5;
        let past = ForceEvent { kernel_ids: vec![1], force: Vec3::x(), step: 2 };
        assert!(rollout(&later, &h, &scene, &IdentityProvider, 3, &[past]).is_err());
    }

    #[test]
    fn scheduled_force_is_applied_once() {
        let (scene, h) = setup();
        let s = bootstrap(&scene, &h, 0.02, None).unwrap();
        let ev = ForceEvent { kernel_ids: vec![7], force: Vec3::new(0.0, 50.0, 0.0), step: 2 };
        let (t, _) = rollout(&s, &h, &scene, &crate::providers::IdentityProvider, 4, &[ev]).unwrap();
        // identity provider re-anchors every step, so the impulse never shows up
        // in a recorded frame; the pre-step state is what carries it
        assert!(t.frames.iter().all(|f| f.positions == scene.positions()));
        let pushed = apply_force(&s, &ForceEvent { kernel_ids: vec![7], force: Vec3::new(0.0, 50.0, 0.0), step: 0 }, &h).unwrap();
        assert!(pushed.current.positions[7].y > scene.positions()[7].y);
    }
}
