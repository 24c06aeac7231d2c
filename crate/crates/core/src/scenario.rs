//! Scenario files: a JSON description of network, flows, modes, control and
//! analysis options. Links, modes and pairs are numbered from 1.

use serde::{Deserialize, Serialize};

use crate::controls::{
    example_density_dependent, synthesize_mode_dependent, synthesize_open_loop, AffineTerm, ControlLaw, DivergeRule,
    MergeRule, PairRule, RampMeter, Routing,
};
use crate::error::{FlownetError, Result};
use crate::flow::{LinkFlow, ModedFlow, SendingFamily, DEFAULT_X_CLIP};
use crate::invariant::{BoxMethod, DEFAULT_PROBE};
use crate::model::Model;
use crate::modes::{example_rates, ActuatorFault, ModeSystem, SensorFault};
use crate::network::{build_network, Network, Storage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageKind {
    #[default]
    Infinite,
    Finite,
}

/// Storage variant and disruption switches applied on top of the spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    /// Storage of every link without an explicit override (the origin is always infinite).
    #[serde(default)]
    pub storage: StorageKind,
    /// Keep sensor and actuator faults.
    #[serde(default = "yes")]
    pub cyber: bool,
    /// Keep capacity caps.
    #[serde(default = "yes")]
    pub physical: bool,
}

fn yes() -> bool {
    true
}

impl Default for Variant {
    fn default() -> Self {
        Variant {
            storage: StorageKind::Infinite,
            cyber: true,
            physical: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub sending: SendingFamily,
    pub wave_speed: f64,
    /// Jam density when finite; defaults to `F/v + F/w` for CTM links.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jam: Option<f64>,
    /// Overrides the variant storage for this link.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapSpec {
    pub mode: usize,
    pub link: usize,
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub mode: usize,
    pub link: usize,
    pub fault: SensorFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorSpec {
    pub mode: usize,
    pub from: usize,
    pub to: usize,
    pub fault: ActuatorFault,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    /// Off-diagonal transition rates; empty for a single undisrupted mode.
    #[serde(default)]
    pub rates: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sending_caps: Vec<CapSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub receiving_caps: Vec<CapSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensor_faults: Vec<SensorSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actuator_faults: Vec<ActuatorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum MergeSpec {
    Priority { link: usize, order: Vec<usize> },
    MaxPressure { link: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeterSpec {
    pub from: usize,
    pub to: usize,
    pub u: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub offset: f64,
    pub link: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairRuleSpec {
    Sending {
        from: usize,
        to: usize,
    },
    Zero {
        from: usize,
        to: usize,
    },
    Affine {
        from: usize,
        to: usize,
        terms: Vec<TermSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    /// Logit diverges with sensitivity `nu`; merges proportional unless listed.
    Logit {
        nu: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        merges: Vec<MergeSpec>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        meters: Vec<MeterSpec>,
    },
    /// Synthesised mode-dependent control.
    Md,
    /// Synthesised open-loop control.
    Ol,
    /// Density-dependent control; without rules, the builtin law of the example network.
    Dd {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rules: Option<Vec<PairRuleSpec>>,
    },
}

impl ControlSpec {
    pub fn label(&self) -> &'static str {
        match self {
            ControlSpec::Logit { .. } => "logit",
            ControlSpec::Md => "md",
            ControlSpec::Ol => "ol",
            ControlSpec::Dd { .. } => "dd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxChoice {
    /// Closed form when one exists for the control, face-wise bisection otherwise.
    #[default]
    Auto,
    Monotone,
}

/// Numerical settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub dt: f64,
    pub horizon: f64,
    pub seeds: usize,
    /// Grid points per free axis for extremal potentials.
    pub grid: usize,
    /// Grid points per free axis for the spillback check.
    pub prop_grid: usize,
    /// Bisection tolerance of the certified throughputs.
    pub tol: f64,
    /// Bisection tolerance of the simulated throughput.
    pub sim_tol: f64,
    pub probe: f64,
    pub box_samples: usize,
    pub boxes: BoxChoice,
    pub seed: u64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            dt: 1e-2,
            horizon: 5e3,
            seeds: 10,
            grid: 9,
            prop_grid: 17,
            tol: 1e-3,
            sim_tol: 5e-3,
            probe: DEFAULT_PROBE,
            box_samples: 10_000,
            boxes: BoxChoice::Auto,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub links: Vec<LinkSpec>,
    /// Pairs `[upstream, downstream]`.
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub modes: ModeSpec,
    pub control: ControlSpec,
    #[serde(default)]
    pub variant: Variant,
    /// Demand used by `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<f64>,
    #[serde(default)]
    pub analysis: AnalysisOptions,
}

/// A scenario turned into a model, a control law and a box method.
#[derive(Debug, Clone)]
pub struct Built {
    pub model: Model,
    pub law: ControlLaw,
    pub boxes: BoxMethod,
}

fn invalid(field: String, msg: impl std::fmt::Display) -> FlownetError {
    FlownetError::Scenario(format!("{field}: {msg}"))
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(text)
            .map_err(|e| FlownetError::Scenario(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialises")
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_control(mut self, control: ControlSpec) -> Self {
        self.control = control;
        self
    }

    /// Referential checks with field paths.
    pub fn validate(&self) -> Result<()> {
        let kk = self.links.len();
        if kk == 0 {
            return Err(invalid("links".into(), "at least one link is required"));
        }
        let link_ok = |field: String, l: usize| {
            if l == 0 || l > kk {
                Err(invalid(field, format!("link {l} does not exist (1..={kk})")))
            } else {
                Ok(())
            }
        };
        for (i, e) in self.edges.iter().enumerate() {
            link_ok(format!("edges[{i}][0]"), e[0])?;
            link_ok(format!("edges[{i}][1]"), e[1])?;
        }
        let m = self.modes.rates.len().max(1);
        let mode_ok = |field: String, s: usize| {
            if s == 0 || s > m {
                Err(invalid(field, format!("mode {s} does not exist (1..={m})")))
            } else {
                Ok(())
            }
        };
        for (name, caps) in [
            ("modes.sending_caps", &self.modes.sending_caps),
            ("modes.receiving_caps", &self.modes.receiving_caps),
        ] {
            for (i, c) in caps.iter().enumerate() {
                mode_ok(format!("{name}[{i}].mode"), c.mode)?;
                link_ok(format!("{name}[{i}].link"), c.link)?;
                if c.cap.is_nan() || c.cap < 0.0 {
                    return Err(invalid(format!("{name}[{i}].cap"), "must be non-negative"));
                }
            }
        }
        for (i, f) in self.modes.sensor_faults.iter().enumerate() {
            mode_ok(format!("modes.sensor_faults[{i}].mode"), f.mode)?;
            link_ok(format!("modes.sensor_faults[{i}].link"), f.link)?;
        }
        let edge_ok = |field: String, a: usize, b: usize| {
            if self.edges.iter().any(|e| e[0] == a && e[1] == b) {
                Ok(())
            } else {
                Err(invalid(field, format!("({a}, {b}) is not an edge")))
            }
        };
        for (i, f) in self.modes.actuator_faults.iter().enumerate() {
            mode_ok(format!("modes.actuator_faults[{i}].mode"), f.mode)?;
            edge_ok(format!("modes.actuator_faults[{i}]"), f.from, f.to)?;
        }
        match &self.control {
            ControlSpec::Logit { nu, merges, meters } => {
                if !(nu.is_finite() && *nu >= 0.0) {
                    return Err(invalid("control.nu".into(), "must be finite and non-negative"));
                }
                for (i, mg) in merges.iter().enumerate() {
                    match mg {
                        MergeSpec::Priority { link, order } => {
                            link_ok(format!("control.merges[{i}].link"), *link)?;
                            for (j, &u) in order.iter().enumerate() {
                                edge_ok(format!("control.merges[{i}].order[{j}]"), u, *link)?;
                            }
                        }
                        MergeSpec::MaxPressure { link } => link_ok(format!("control.merges[{i}].link"), *link)?,
                    }
                }
                for (i, mt) in meters.iter().enumerate() {
                    edge_ok(format!("control.meters[{i}]"), mt.from, mt.to)?;
                }
            }
            ControlSpec::Dd { rules: Some(rules) } => {
                for (i, r) in rules.iter().enumerate() {
                    let (a, b) = r.pair();
                    edge_ok(format!("control.rules[{i}]"), a, b)?;
                    if let PairRuleSpec::Affine { terms, .. } = r {
                        for (j, t) in terms.iter().enumerate() {
                            link_ok(format!("control.rules[{i}].terms[{j}].link"), t.link)?;
                        }
                    }
                }
            }
            _ => {}
        }
        let o = &self.analysis;
        let positive = [
            ("dt", o.dt),
            ("horizon", o.horizon),
            ("tol", o.tol),
            ("sim_tol", o.sim_tol),
            ("probe", o.probe),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("analysis.{name}"), "must be positive"));
            }
        }
        if o.seeds == 0 || o.grid < 2 || o.prop_grid < 2 {
            return Err(invalid("analysis".into(), "seeds >= 1 and grids >= 2 are required"));
        }
        if let Some(a) = self.demand {
            if !(a.is_finite() && a >= 0.0) {
                return Err(invalid("demand".into(), "must be non-negative"));
            }
        }
        Ok(())
    }

    fn storage_of(&self, k: usize, origin: bool) -> Result<Storage> {
        let spec = &self.links[k];
        let kind = if origin {
            StorageKind::Infinite
        } else {
            spec.storage.unwrap_or(self.variant.storage)
        };
        Ok(match kind {
            StorageKind::Infinite => Storage::Infinite,
            StorageKind::Finite => {
                let jam = match (spec.jam, spec.sending) {
                    (Some(j), _) => j,
                    (None, SendingFamily::Ctm { v, capacity }) => capacity / v + capacity / spec.wave_speed,
                    (None, _) => return Err(invalid(format!("links[{k}].jam"), "required for finite non-CTM links")),
                };
                Storage::Finite { jam }
            }
        })
    }

    /// The network with the variant storage applied.
    pub fn network(&self) -> Result<Network> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0] - 1, e[1] - 1)).collect();
        // Topology first, to locate the origin.
        let probe = build_network(vec![Storage::Infinite; self.links.len()], &edges)?;
        let storage = (0..self.links.len())
            .map(|k| self.storage_of(k, k == probe.origin()))
            .collect::<Result<Vec<_>>>()?;
        build_network(storage, &edges)
    }

    pub fn mode_system(&self) -> Result<ModeSystem> {
        let mut ms = if self.modes.rates.is_empty() {
            ModeSystem::single()
        } else {
            ModeSystem::new(self.modes.rates.clone())?
        };
        if self.variant.cyber {
            for f in &self.modes.sensor_faults {
                ms = ms.with_sensor_fault(f.mode - 1, f.link - 1, f.fault);
            }
        }
        Ok(ms)
    }

    pub fn model(&self) -> Result<Model> {
        self.validate()?;
        let net = self.network()?;
        let mut ms = self.mode_system()?;
        if self.variant.cyber {
            for f in &self.modes.actuator_faults {
                let p = net.pair_id(f.from - 1, f.to - 1).expect("validated edge");
                ms = ms.with_actuator_fault(f.mode - 1, p, f.fault);
            }
        }
        let m = ms.mode_count();
        let mut flows: Vec<ModedFlow> = self
            .links
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let mut f = ModedFlow::nominal(
                    LinkFlow {
                        sending: l.sending,
                        wave_speed: l.wave_speed,
                        storage: net.storage(k),
                    },
                    m,
                );
                f.x_clip = l.x_clip.unwrap_or(DEFAULT_X_CLIP);
                f
            })
            .collect();
        if self.variant.physical {
            for c in &self.modes.sending_caps {
                flows[c.link - 1].send_caps[c.mode - 1] = c.cap;
            }
            for c in &self.modes.receiving_caps {
                flows[c.link - 1].recv_caps[c.mode - 1] = c.cap;
            }
        }
        Model::new(net, flows, ms)
    }

    /// Model, control law and box method.
    pub fn build(&self) -> Result<Built> {
        let model = self.model()?;
        let net = &model.net;
        let (law, boxes) = match &self.control {
            ControlSpec::Logit { nu, merges, meters } => {
                let mut r = Routing::logit(net, *nu);
                for mg in merges {
                    match mg {
                        MergeSpec::Priority { link, order } => {
                            r = r.with_merge(
                                link - 1,
                                MergeRule::Priority {
                                    order: order.iter().map(|u| u - 1).collect(),
                                },
                            )
                        }
                        MergeSpec::MaxPressure { link } => r = r.with_merge(link - 1, MergeRule::MaxPressure),
                    }
                }
                for mt in meters {
                    r = r.with_meter(RampMeter {
                        pair: net.pair_id(mt.from - 1, mt.to - 1).expect("validated edge"),
                        u: mt.u,
                        kappa: mt.kappa,
                    });
                }
                let all_logit = r.diverge.iter().all(|d| match d {
                    Some(DivergeRule::Logit { nu: n }) => n == nu,
                    None => true,
                });
                let example = net.link_count() == 7 && net.pair_count() == 8 && meters.is_empty() && all_logit;
                let method = if example && matches!(model.flows[0].base.sending, SendingFamily::Ctm { .. }) {
                    BoxMethod::Logit { nu: *nu }
                } else {
                    BoxMethod::Monotone
                };
                (ControlLaw::Routing(r), method)
            }
            ControlSpec::Md => (synthesize_mode_dependent(&model), BoxMethod::ModeDependent),
            ControlSpec::Ol => (synthesize_open_loop(&model).0, BoxMethod::Monotone),
            ControlSpec::Dd { rules: None } => {
                let link5_infinite = !net.storage(4.min(net.link_count() - 1)).is_finite();
                (example_density_dependent(net, link5_infinite)?, BoxMethod::Monotone)
            }
            ControlSpec::Dd { rules: Some(rules) } => {
                let mut out = vec![PairRule::Sending; net.pair_count()];
                for r in rules {
                    let (a, b) = r.pair();
                    let p = net.pair_id(a - 1, b - 1).expect("validated edge");
                    out[p] = match r {
                        PairRuleSpec::Sending { .. } => PairRule::Sending,
                        PairRuleSpec::Zero { .. } => PairRule::Zero,
                        PairRuleSpec::Affine { terms, .. } => PairRule::Affine {
                            terms: terms
                                .iter()
                                .map(|t| AffineTerm {
                                    offset: t.offset,
                                    link: t.link - 1,
                                })
                                .collect(),
                        },
                    };
                }
                (ControlLaw::DensityDependent(out), BoxMethod::Monotone)
            }
        };
        law.validate(&model)?;
        let boxes = match self.analysis.boxes {
            BoxChoice::Auto => boxes,
            BoxChoice::Monotone => BoxMethod::Monotone,
        };
        Ok(Built { model, law, boxes })
    }

    /// The seven-link example network: links 1..7, pairs 1→2, 1→5, 2→3,
    /// 2→4, 3→7, 4→6, 5→6, 6→7; four equally likely modes with link 6
    /// closed in modes 2 and 4 and a denial-of-service sensor on link 5 in
    /// modes 3 and 4. Logit routing with `nu = 2`, link 4 served before
    /// link 5 into link 6 and link 3 before link 6 into link 7.
    pub fn example7() -> Self {
        let caps = [1.0, 0.5, 0.5, 0.5, 0.5, 1.0, 1.0];
        Scenario {
            name: "example7".into(),
            links: caps
                .iter()
                .map(|&c| LinkSpec {
                    sending: SendingFamily::Ctm { v: 1.0, capacity: c },
                    wave_speed: 1.0,
                    jam: None,
                    storage: None,
                    x_clip: None,
                })
                .collect(),
            edges: vec![[1, 2], [1, 5], [2, 3], [2, 4], [3, 7], [4, 6], [5, 6], [6, 7]],
            modes: ModeSpec {
                rates: example_rates(),
                sending_caps: vec![
                    CapSpec {
                        mode: 2,
                        link: 6,
                        cap: 0.0,
                    },
                    CapSpec {
                        mode: 4,
                        link: 6,
                        cap: 0.0,
                    },
                ],
                receiving_caps: vec![],
                sensor_faults: vec![
                    SensorSpec {
                        mode: 3,
                        link: 5,
                        fault: SensorFault::DenialOfService,
                    },
                    SensorSpec {
                        mode: 4,
                        link: 5,
                        fault: SensorFault::DenialOfService,
                    },
                ],
                actuator_faults: vec![],
            },
            control: ControlSpec::Logit {
                nu: 2.0,
                merges: vec![
                    MergeSpec::Priority {
                        link: 6,
                        order: vec![4, 5],
                    },
                    MergeSpec::Priority {
                        link: 7,
                        order: vec![3, 6],
                    },
                ],
                meters: vec![],
            },
            variant: Variant::default(),
            demand: Some(0.5),
            analysis: AnalysisOptions::default(),
        }
    }
}

impl PairRuleSpec {
    fn pair(&self) -> (usize, usize) {
        match *self {
            PairRuleSpec::Sending { from, to }
            | PairRuleSpec::Zero { from, to }
            | PairRuleSpec::Affine { from, to, .. } => (from, to),
        }
    }
}

/// Rows of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    /// Scenario file, relative to the matrix file.
    pub scenario: String,
    /// Controls compared in every row; empty means the scenario's own control.
    #[serde(default)]
    pub controls: Vec<ControlSpec>,
    #[serde(default)]
    pub rows: Vec<Variant>,
}

impl Matrix {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| FlownetError::Scenario(format!("line {}, column {}: {e}", e.line(), e.column())))
    }
}
