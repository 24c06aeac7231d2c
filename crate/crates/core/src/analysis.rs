//! End-to-end workflows behind the command line: analysis of one scenario,
//! control synthesis, comparison tables and single trajectories, with their
//! CSV, aligned-text and SVG renderings.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::capacity::{capacity_summary, CapacitySummary};
use crate::controls::{mode_dependent_table, synthesize_open_loop, ControlLaw, PairRule};
use crate::error::{FlownetError, Result};
use crate::model::Model;
use crate::scenario::{AnalysisOptions, ControlSpec, Matrix, Scenario, StorageKind, Variant};
use crate::sim::{simulate, simulated_throughput, SimOptions, Trajectory};
use crate::stability::{certified_throughput, dd_lower_bound, Assessment, CertifyOptions, Criterion, LowerBound};

pub fn certify_options(a: &AnalysisOptions) -> CertifyOptions {
    CertifyOptions {
        grid: a.grid,
        prop_grid: a.prop_grid,
        probe: a.probe,
        tol: a.tol,
        box_samples: a.box_samples,
        ..CertifyOptions::default()
    }
}

pub fn sim_options(a: &AnalysisOptions) -> SimOptions {
    SimOptions {
        dt: a.dt,
        horizon: a.horizon,
        seeds: a.seeds,
        seed: a.seed,
        ..SimOptions::default()
    }
}

/// Result of [`analyze`].
#[derive(Debug, Clone)]
pub struct Analysis {
    pub name: String,
    pub control: &'static str,
    pub variant: Variant,
    pub capacity: CapacitySummary,
    pub alpha_t: f64,
    pub alpha_p: f64,
    pub alpha_sim: Option<f64>,
    /// Drift assessment at `alpha_t`.
    pub certified: Assessment,
    /// Density-dependent laws only.
    pub lower: Option<LowerBound>,
}

/// Capacities, certified throughputs under both drift criteria, the
/// lower bound for density-dependent laws and, when `with_sim`, the
/// simulated throughput.
pub fn analyze(sc: &Scenario, with_sim: bool) -> Result<Analysis> {
    let built = sc.build()?;
    let (model, law) = (&built.model, &built.law);
    let copts = certify_options(&sc.analysis);
    let capacity = capacity_summary(model);
    let (alpha_t, certified) = certified_throughput(model, law, built.boxes, Criterion::Drift, &copts)?;
    let (alpha_p, _) = certified_throughput(model, law, built.boxes, Criterion::Spillback, &copts)?;
    let lower = match law {
        ControlLaw::DensityDependent(_) => Some(dd_lower_bound(model, law, &copts)?),
        _ => None,
    };
    let alpha_sim = if with_sim {
        Some(simulated_throughput(
            model,
            law,
            &sim_options(&sc.analysis),
            sc.analysis.sim_tol,
        )?)
    } else {
        None
    };
    Ok(Analysis {
        name: sc.name.clone(),
        control: sc.control.label(),
        variant: sc.variant,
        capacity,
        alpha_t,
        alpha_p,
        alpha_sim,
        certified,
        lower,
    })
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), num)
}

fn links(ls: &[usize]) -> String {
    ls.iter().map(|l| (l + 1).to_string()).collect::<Vec<_>>().join(" ")
}

/// Left-aligned first column, right-aligned others, two spaces apart.
pub fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    for r in std::iter::once(header).chain(rows.iter().map(|r| r.as_slice())) {
        let cells: Vec<String> = r
            .iter()
            .zip(&width)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Analysis {
    fn summary_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![
            vec!["emcc".into(), num(self.capacity.emcc)],
            vec!["mecc".into(), num(self.capacity.mecc)],
            vec!["mecc_cut".into(), links(&self.capacity.mecc_cut)],
            vec!["alpha_t".into(), num(self.alpha_t)],
            vec!["alpha_p".into(), num(self.alpha_p)],
            vec!["alpha_sim".into(), opt(self.alpha_sim)],
        ];
        if let Some(lb) = &self.lower {
            rows.push(vec!["lower_bound".into(), num(lb.alpha)]);
            rows.push(vec![
                "lower_bound_structure".into(),
                lb.violation
                    .clone()
                    .map_or_else(|| "ok".into(), |v| v.replace(',', ";")),
            ]);
        }
        rows
    }

    pub fn summary_csv(&self) -> String {
        csv(&strings(&["quantity", "value"]), &self.summary_rows())
    }

    fn box_rows(&self) -> Vec<Vec<String>> {
        let bx = &self.certified.prepared.bx;
        let st = &self.certified.structure;
        (0..bx.len())
            .map(|k| {
                vec![
                    (k + 1).to_string(),
                    num(bx.lower[k]),
                    num(bx.upper[k]),
                    links(&st.m_mu[k]),
                    links(&st.n_mu[k]),
                ]
            })
            .collect()
    }

    /// Invariant box at `alpha_t` with the bottleneck sets of each link.
    pub fn box_csv(&self) -> String {
        csv(&strings(&["link", "lower", "upper", "m_mu", "n_mu"]), &self.box_rows())
    }

    fn certificate_parts(&self) -> Option<(Vec<String>, Vec<Vec<String>>)> {
        let c = self.certified.check.certificate.as_ref()?;
        let m = c.z.first().map_or(0, |z| z.len());
        let mut header = strings(&["link", "a", "eta"]);
        header.extend((1..=m).map(|s| format!("z{s}")));
        header.extend((1..=m).map(|s| format!("b{s}")));
        let rows = c
            .links
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut r = vec![(k + 1).to_string(), num(c.a[i]), num(c.eta[i])];
                r.extend(c.z[i].iter().map(|&v| num(v)));
                r.extend(c.b[i].iter().map(|&v| num(v)));
                r
            })
            .collect();
        Some((header, rows))
    }

    /// Lyapunov certificate at `alpha_t`; header only when no link is unbounded.
    pub fn certificate_csv(&self) -> String {
        match self.certificate_parts() {
            Some((h, r)) => csv(&h, &r),
            None => "link,a,eta\n".into(),
        }
    }

    pub fn text(&self) -> String {
        let mut out = format!(
            "{} / {} / {}\n\n",
            self.name,
            self.control,
            variant_label(&self.variant)
        );
        out.push_str(&aligned(&strings(&["quantity", "value"]), &self.summary_rows()));
        let _ = writeln!(out, "\ninvariant box at alpha_t");
        out.push_str(&aligned(
            &strings(&["link", "lower", "upper", "m_mu", "n_mu"]),
            &self.box_rows(),
        ));
        if let (Some((h, r)), Some(c)) = (self.certificate_parts(), &self.certified.check.certificate) {
            let _ = writeln!(
                out,
                "\ncertificate (delta = {}, bks residual = {:.1e})",
                num(c.delta),
                c.bks_residual
            );
            out.push_str(&aligned(&h, &r));
        }
        out
    }
}

pub fn variant_label(v: &Variant) -> String {
    let yn = |b: bool| if b { "yes" } else { "no" };
    format!(
        "storage={} cyber={} physical={}",
        match v.storage {
            StorageKind::Infinite => "inf",
            StorageKind::Finite => "fin",
        },
        yn(v.cyber),
        yn(v.physical)
    )
}

/// Synthesised control of a scenario.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub kind: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Max-flow values: one per mode for `md`, the expected-capacity value for `ol`.
    pub values: Vec<f64>,
}

impl Synthesis {
    pub fn csv(&self) -> String {
        csv(&self.header, &self.rows)
    }

    pub fn text(&self) -> String {
        let mut out = aligned(&self.header, &self.rows);
        if !self.values.is_empty() {
            let vs: Vec<String> = self.values.iter().map(|&v| num(v)).collect();
            let _ = writeln!(out, "\nmax-flow value: {}", vs.join(" "));
        }
        out
    }
}

fn rule_text(rule: &PairRule) -> String {
    match rule {
        PairRule::Sending => "sending".into(),
        PairRule::Zero => "0".into(),
        PairRule::Affine { terms } => {
            let ts: Vec<String> = terms
                .iter()
                .map(|t| format!("{} - x{}", t.offset, t.link + 1))
                .collect();
            if ts.len() == 1 {
                ts[0].clone()
            } else {
                format!("min{{{}}}", ts.join("; "))
            }
        }
    }
}

/// Tabulates the scenario's control: per-mode pair flows for `md`, pair
/// flows and ratios for `ol`, rules for `dd`. Logit routing is not
/// synthesised and yields a scenario error.
pub fn synthesize(sc: &Scenario) -> Result<Synthesis> {
    let built = sc.build()?;
    let model = &built.model;
    let pairs = model.net.pairs();
    match &sc.control {
        ControlSpec::Md => {
            let (values, tables) = mode_dependent_table(model);
            let rows = tables
                .iter()
                .enumerate()
                .flat_map(|(s, t)| {
                    pairs.iter().zip(t).map(move |(&(a, b), &mu)| {
                        vec![(s + 1).to_string(), (a + 1).to_string(), (b + 1).to_string(), num(mu)]
                    })
                })
                .collect();
            Ok(Synthesis {
                kind: "md",
                header: strings(&["mode", "from", "to", "mu"]),
                rows,
                values,
            })
        }
        ControlSpec::Ol => {
            let (law, ratios) = synthesize_open_loop(model);
            let ControlLaw::OpenLoop(mu) = law else { unreachable!() };
            let rows = pairs
                .iter()
                .enumerate()
                .map(|(p, &(a, b))| {
                    vec![
                        (a + 1).to_string(),
                        (b + 1).to_string(),
                        num(mu[p]),
                        num(ratios.beta[p]),
                    ]
                })
                .collect();
            Ok(Synthesis {
                kind: "ol",
                header: strings(&["from", "to", "mu", "beta"]),
                rows,
                values: vec![ratios.value],
            })
        }
        ControlSpec::Dd { .. } => {
            let ControlLaw::DensityDependent(rules) = &built.law else {
                unreachable!()
            };
            let rows = pairs
                .iter()
                .zip(rules)
                .map(|(&(a, b), r)| vec![(a + 1).to_string(), (b + 1).to_string(), rule_text(r)])
                .collect();
            Ok(Synthesis {
                kind: "dd",
                header: strings(&["from", "to", "rule"]),
                rows,
                values: Vec::new(),
            })
        }
        ControlSpec::Logit { .. } => Err(FlownetError::Scenario(
            "control.kind: logit routing is given, not synthesised; use md, ol or dd".into(),
        )),
    }
}

/// Throughputs of one control on one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub alpha_t: f64,
    pub alpha_p: f64,
    pub alpha_sim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Table {
    pub controls: Vec<&'static str>,
    pub rows: Vec<(Variant, Vec<Cell>)>,
}

/// Loads a matrix and its scenario, resolving the scenario path against
/// `base_dir`.
pub fn load_matrix(matrix: &Matrix, base_dir: &Path) -> Result<Scenario> {
    let path = base_dir.join(&matrix.scenario);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| FlownetError::Scenario(format!("scenario {}: {e}", path.display())))?;
    Scenario::from_json(&text)
}

/// Every row under every control; cells run in parallel.
pub fn table(base: &Scenario, matrix: &Matrix, with_sim: bool) -> Result<Table> {
    let controls = if matrix.controls.is_empty() {
        vec![base.control.clone()]
    } else {
        matrix.controls.clone()
    };
    let jobs: Vec<(usize, usize)> = (0..matrix.rows.len())
        .flat_map(|r| (0..controls.len()).map(move |c| (r, c)))
        .collect();
    let cells: Vec<Cell> = jobs
        .par_iter()
        .map(|&(r, c)| {
            let sc = base
                .clone()
                .with_variant(matrix.rows[r])
                .with_control(controls[c].clone());
            let built = sc.build()?;
            let copts = certify_options(&sc.analysis);
            let cert = |crit| certified_throughput(&built.model, &built.law, built.boxes, crit, &copts).map(|r| r.0);
            let alpha_sim = if with_sim {
                Some(simulated_throughput(
                    &built.model,
                    &built.law,
                    &sim_options(&sc.analysis),
                    sc.analysis.sim_tol,
                )?)
            } else {
                None
            };
            Ok(Cell {
                alpha_t: cert(Criterion::Drift)?,
                alpha_p: cert(Criterion::Spillback)?,
                alpha_sim,
            })
        })
        .collect::<Result<_>>()?;
    let mut it = cells.into_iter();
    let rows = matrix
        .rows
        .iter()
        .map(|v| (*v, it.by_ref().take(controls.len()).collect()))
        .collect();
    Ok(Table {
        controls: controls.iter().map(|c| c.label()).collect(),
        rows,
    })
}

impl Table {
    fn header(&self) -> Vec<String> {
        let mut h = strings(&["storage", "cyber", "physical"]);
        for c in &self.controls {
            h.extend(["t", "p", "sim"].iter().map(|x| format!("{c}_{x}")));
        }
        h
    }

    fn body(&self, digits: usize) -> Vec<Vec<String>> {
        let f = |v: f64| format!("{v:.digits$}");
        self.rows
            .iter()
            .map(|(v, cells)| {
                let mut r = vec![
                    match v.storage {
                        StorageKind::Infinite => "inf".to_string(),
                        StorageKind::Finite => "fin".to_string(),
                    },
                    if v.cyber { "yes" } else { "no" }.to_string(),
                    if v.physical { "yes" } else { "no" }.to_string(),
                ];
                for c in cells {
                    r.push(f(c.alpha_t));
                    r.push(f(c.alpha_p));
                    r.push(c.alpha_sim.map_or_else(|| "-".into(), f));
                }
                r
            })
            .collect()
    }

    pub fn csv(&self) -> String {
        csv(&self.header(), &self.body(6))
    }

    pub fn text(&self) -> String {
        aligned(&self.header(), &self.body(3))
    }
}

/// One replicate from the empty network in mode 1 at the scenario demand
/// (or `alpha` when given).
pub fn run_trajectory(sc: &Scenario, alpha: Option<f64>) -> Result<(Model, Trajectory)> {
    let alpha = alpha
        .or(sc.demand)
        .ok_or_else(|| FlownetError::Scenario("demand: needed for simulate (or pass a demand)".into()))?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(FlownetError::Scenario(format!(
            "demand: must be a nonnegative number, got {alpha}"
        )));
    }
    let built = sc.build()?;
    let a = &sc.analysis;
    let x0 = vec![0.0; built.model.link_count()];
    let tr = simulate(&built.model, &built.law, alpha, &x0, 0, a.horizon, a.dt, a.seed, 2000)?;
    Ok((built.model, tr))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Densities (one polyline per link) and the running average of total
/// mass, on a shared time axis; mode changes shade the background.
pub fn trajectory_svg(tr: &Trajectory) -> String {
    let (w, h, pad) = (720.0, 400.0, 40.0);
    let t_max = tr.times.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let k = tr.states.first().map_or(0, |s| s.x.len());
    let y_max = tr
        .states
        .iter()
        .flat_map(|s| s.x.iter().copied())
        .chain(tr.running_avg.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let px = |t: f64| pad + (w - 2.0 * pad) * t / t_max;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * v / y_max;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for i in 0..tr.times.len().saturating_sub(1) {
        if tr.states[i].s % 2 == 1 {
            let (a, b) = (px(tr.times[i]), px(tr.times[i + 1]));
            let _ = writeln!(
                out,
                "<rect x=\"{a:.2}\" y=\"{pad}\" width=\"{:.2}\" height=\"{}\" fill=\"#eeeeee\"/>",
                b - a,
                h - 2.0 * pad
            );
        }
    }
    let _ = writeln!(
        out,
        "<polyline points=\"{pad},{pad} {pad},{y0} {x1},{y0}\" fill=\"none\" stroke=\"black\"/>",
        y0 = h - pad,
        x1 = w - pad
    );
    let _ = writeln!(out, "<text x=\"{pad}\" y=\"{}\">0</text>", h - pad + 14.0);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">t = {t_max:.4}</text>",
        w - pad,
        h - pad + 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y_max:.4}</text>",
        pad - 4.0,
        pad + 4.0
    );
    let mut line = |vals: &mut dyn Iterator<Item = f64>, colour: &str, label: &str, idx: usize| {
        let pts: Vec<String> = tr
            .times
            .iter()
            .zip(vals)
            .map(|(&t, v)| format!("{:.2},{:.2}", px(t), py(v)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{label}</text>",
            w - pad + 4.0,
            pad + 14.0 * idx as f64
        );
    };
    for l in 0..k {
        line(
            &mut tr.states.iter().map(|s| s.x[l]),
            PALETTE[l % PALETTE.len()],
            &format!("x{}", l + 1),
            l,
        );
    }
    line(&mut tr.running_avg.iter().copied(), "black", "avg", k);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_pads_columns() {
        let t = aligned(&strings(&["a", "bb"]), &[strings(&["ccc", "d"])]);
        assert_eq!(t, "a    bb\nccc   d\n");
    }

    #[test]
    fn logit_is_not_synthesised() {
        assert!(matches!(
            synthesize(&Scenario::example7()),
            Err(FlownetError::Scenario(_))
        ));
    }

    #[test]
    fn dd_rules_render() {
        let sc = Scenario::example7().with_control(ControlSpec::Dd { rules: None });
        let s = synthesize(&sc).unwrap();
        let r15 = s.rows.iter().find(|r| r[0] == "1" && r[1] == "5").unwrap();
        assert_eq!(r15[2], "min{2 - x5; 2 - x6}");
    }

    #[test]
    fn empty_matrix_gives_header_only() {
        let m = Matrix {
            scenario: String::new(),
            controls: vec![ControlSpec::Md],
            rows: vec![],
        };
        let t = table(&Scenario::example7(), &m, false).unwrap();
        assert_eq!(t.csv(), "storage,cyber,physical,md_t,md_p,md_sim\n");
    }

    #[test]
    fn svg_is_well_formed() {
        let mut sc = Scenario::example7();
        sc.analysis.horizon = 5.0;
        let (_, tr) = run_trajectory(&sc, Some(0.5)).unwrap();
        let svg = trajectory_svg(&tr);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1 + 7 + 1);
    }
}
