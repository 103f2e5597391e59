//! Tables, statistics and directional checks over a finished run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use serde::{Deserialize, Serialize};

use super::config::{sha256_hex, ExperimentConfig, Variant};
use super::evaluate::ModelMetrics;
use super::{derived_seeds, read_json, student_name, write, write_json, Layout, PipelineError, TEACHER};
use crate::analysis::{
    compare_pair, relative_reduction, AlignmentReport, AlignmentStats, PairComparison, Partition, SignTestResult,
    Stratum, Winner,
};
use crate::attacks::{Method, Orientation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub method: Method,
    pub hyperparams: String,
    #[serde(with = "crate::attacks::records::tau_serde")]
    pub tau: f64,
    pub orientation: Orientation,
    pub accuracy: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Share of vulnerable / non-vulnerable members flagged as members.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vulnerable_tpr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonvulnerable_tpr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub members: f64,
    pub nonmembers: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vulnerable: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonvulnerable: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub attacks: Vec<AttackSummary>,
    pub mean_accuracy: f64,
    /// Mean member-specific accuracy over attacks.
    pub mean_tpr: f64,
    pub mean_tnr: f64,
    pub perplexity: PerplexityRow,
}

impl ModelSummary {
    pub fn attack(&self, m: Method) -> Option<&AttackSummary> {
        self.attacks.iter().find(|a| a.method == m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentComparison {
    pub student: String,
    pub aggregate: PairComparison,
    pub member: PairComparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTests {
    pub teacher_higher: Option<SignTestResult>,
    pub teacher_lower: Option<SignTestResult>,
}

impl SignTests {
    fn of(p: &PairComparison) -> Self {
        Self {
            teacher_higher: p.sign_test_teacher_higher().ok(),
            teacher_lower: p.sign_test_teacher_lower().ok(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub name: String,
    pub baseline: String,
    pub variant: String,
    /// Mean over attacks of `1 - variant / baseline`, in percent.
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub description: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<ModelSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partition_sizes: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<AlignmentStats>>,
    pub comparisons: Vec<StudentComparison>,
    pub pooled_aggregate: SignTests,
    pub pooled_member: SignTests,
    pub reductions: Vec<Reduction>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn model(&self, name: &str) -> Option<&ModelSummary> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn check(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn summarize(m: &ModelMetrics, partition: Option<&Partition>) -> ModelSummary {
    let stratum = |id: &str| partition.and_then(|p| p.stratum_of(id));
    let attacks: Vec<AttackSummary> = m
        .attacks
        .iter()
        .map(|a| {
            let c = &a.calibration;
            let sub = |s| {
                partition.and_then(|_| m.subset_accuracy(c.method, |e| e.member && stratum(&e.id) == Some(s)))
            };
            AttackSummary {
                method: c.method,
                hyperparams: super::hyper_tag(c),
                tau: c.tau,
                orientation: c.orientation,
                accuracy: c.accuracy,
                tpr: c.tpr,
                tnr: c.tnr,
                vulnerable_tpr: sub(Stratum::Vulnerable),
                nonvulnerable_tpr: sub(Stratum::Nonvulnerable),
            }
        })
        .collect();
    let ppl_stratum = |s| partition.and_then(|_| m.perplexity(|e| e.member && stratum(&e.id) == Some(s)));
    ModelSummary {
        name: m.model.clone(),
        mean_accuracy: mean(attacks.iter().map(|a| a.accuracy)),
        mean_tpr: mean(attacks.iter().map(|a| a.tpr)),
        mean_tnr: mean(attacks.iter().map(|a| a.tnr)),
        perplexity: PerplexityRow {
            members: m.perplexity(|e| e.member).unwrap_or(f64::NAN),
            nonmembers: m.perplexity(|e| !e.member).unwrap_or(f64::NAN),
            vulnerable: ppl_stratum(Stratum::Vulnerable),
            nonvulnerable: ppl_stratum(Stratum::Nonvulnerable),
        },
        attacks,
    }
}

fn cells(m: &ModelSummary, value: impl Fn(&AttackSummary) -> f64) -> Vec<(String, f64)> {
    m.attacks.iter().map(|a| (a.method.name().to_string(), value(a))).collect()
}

fn reduction(
    name: &str,
    base: &ModelSummary,
    var: &ModelSummary,
    value: impl Fn(&AttackSummary) -> Option<f64>,
) -> Option<Reduction> {
    let pairs: Vec<(f64, f64)> = base
        .attacks
        .iter()
        .map(|a| Some((value(a)?, value(var.attack(a.method)?)?)))
        .collect::<Option<_>>()?;
    let (b, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Some(Reduction {
        name: name.into(),
        baseline: base.name.clone(),
        variant: var.name.clone(),
        percent: 100.0 * relative_reduction(&b, &v).ok()?,
    })
}

fn check(id: &str, description: &str, holds: bool, detail: String) -> Check {
    Check {
        id: id.into(),
        description: description.into(),
        holds,
        detail,
    }
}

fn directional_checks(r: &Report) -> Vec<Check> {
    let mut out = Vec::new();
    if let Some(a) = r.model(TEACHER).and_then(|t| t.attack(Method::Loss)) {
        out.push(check(
            "teacher-overfit",
            "teacher loss-attack accuracy >= 0.9",
            a.accuracy >= 0.9,
            format!("A = {:.4}", a.accuracy),
        ));
    }
    let none = r.model(&student_name(Variant::None));
    if let (Some(full), Some(nv)) = (none, r.model(&student_name(Variant::Nonvulnerable))) {
        let (pf, pn) = (full.perplexity.members, nv.perplexity.members);
        out.push(check(
            "data-selection",
            "nonvulnerable student: lower mean member TPR and higher member perplexity than the full-data student",
            nv.mean_tpr < full.mean_tpr && pn > pf,
            format!(
                "mean TPR {:.4} vs {:.4}; member perplexity {:.3} vs {:.3}",
                nv.mean_tpr, full.mean_tpr, pn, pf
            ),
        ));
    }
    if let Some(al) = &r.alignment {
        let get = |s| al.iter().find(|a| a.stratum == s);
        if let (Some(v), Some(n)) = (get(Stratum::Vulnerable), get(Stratum::Nonvulnerable)) {
            out.push(check(
                "alignment",
                "vulnerable stratum: higher ground-truth probability and lower KL to ground truth",
                v.mean_gt_prob > n.mean_gt_prob && v.mean_kl_to_gt < n.mean_kl_to_gt,
                format!(
                    "p(y) {:.4} vs {:.4}; KL {:.4} vs {:.4}",
                    v.mean_gt_prob, n.mean_gt_prob, v.mean_kl_to_gt, n.mean_kl_to_gt
                ),
            ));
        }
    }
    if let Some(full) = none {
        let others: Vec<&ModelSummary> = [Variant::Bottleneck, Variant::All]
            .iter()
            .filter_map(|&v| r.model(&student_name(v)))
            .collect();
        if !others.is_empty() {
            out.push(check(
                "architecture",
                "bottleneck and all students: mean member TPR <= the none student",
                others.iter().all(|m| m.mean_tpr <= full.mean_tpr),
                others
                    .iter()
                    .map(|m| format!("{} {:.4}", m.name, m.mean_tpr))
                    .chain(std::iter::once(format!("{} {:.4}", full.name, full.mean_tpr)))
                    .collect::<Vec<_>>()
                    .join("; "),
            ));
        }
    }
    out
}

/// Reads the teacher's and every student's attack results.
pub fn build_report(layout: &Layout) -> Result<Report, PipelineError> {
    let teacher_path = layout.metrics(TEACHER);
    if !teacher_path.exists() {
        return Err(PipelineError::MissingArtifact {
            what: "teacher metrics",
            path: teacher_path.display().to_string(),
            stage: "attack --model teacher",
        });
    }
    let partition = if layout.partition().exists() {
        Some(Partition::load(&layout.partition())?)
    } else {
        None
    };
    let alignment_path = layout.alignment_dir().join("alignment.json");
    let alignment: Option<AlignmentReport> = if alignment_path.exists() {
        Some(read_json(&alignment_path)?)
    } else {
        None
    };
    let mut models = vec![summarize(&read_json(&teacher_path)?, partition.as_ref())];
    for v in Variant::ALL {
        let path = layout.metrics(&student_name(v));
        if path.exists() {
            models.push(summarize(&read_json(&path)?, partition.as_ref()));
        }
    }
    if models.len() < 2 {
        return Err(PipelineError::MissingArtifact {
            what: "student metrics",
            path: layout.root().join("attacks").display().to_string(),
            stage: "attack --model <variant>",
        });
    }

    let teacher = &models[0];
    let mut comparisons = Vec::new();
    for s in &models[1..] {
        comparisons.push(StudentComparison {
            student: s.name.clone(),
            aggregate: compare_pair(&cells(teacher, |a| a.accuracy), &cells(s, |a| a.accuracy))?,
            member: compare_pair(&cells(teacher, |a| a.tpr), &cells(s, |a| a.tpr))?,
        });
    }
    let pooled = |f: fn(&StudentComparison) -> &PairComparison| {
        SignTests::of(&PairComparison::merge(&comparisons.iter().map(|c| f(c).clone()).collect::<Vec<_>>()))
    };
    let pooled_aggregate = pooled(|c| &c.aggregate);
    let pooled_member = pooled(|c| &c.member);

    let find = |v: Variant| models.iter().find(|m| m.name == student_name(v));
    let mut reductions = Vec::new();
    if let Some(base) = find(Variant::None) {
        for v in [Variant::Bottleneck, Variant::Nonorm, Variant::All] {
            if let Some(var) = find(v) {
                reductions.extend(reduction(&format!("member none->{v}"), base, var, |a| Some(a.tpr)));
                reductions.extend(reduction(&format!("non-member none->{v}"), base, var, |a| Some(a.tnr)));
            }
        }
        if let Some(var) = find(Variant::Nonvulnerable) {
            reductions.extend(reduction("vulnerable full->nonvulnerable", base, var, |a| a.vulnerable_tpr));
            reductions.extend(reduction("member full->nonvulnerable", base, var, |a| Some(a.tpr)));
        }
    }

    let mut report = Report {
        partition_sizes: partition
            .as_ref()
            .map(|p| (p.vulnerable_ids.len(), p.nonvulnerable_ids.len())),
        alignment: alignment.map(|a| a.strata),
        models,
        comparisons,
        pooled_aggregate,
        pooled_member,
        reductions,
        checks: Vec::new(),
    };
    report.checks = directional_checks(&report);
    Ok(report)
}

fn mark(w: Winner) -> &'static str {
    match w {
        Winner::Teacher => "teacher",
        Winner::Student => "student",
        Winner::Tie => "tie",
    }
}

fn grid(report: &Report, member: bool) -> (String, String) {
    let teacher = &report.models[0];
    let mut csv = String::from("student,attack,teacher,student_value,winner\n");
    let methods: Vec<Method> = teacher.attacks.iter().map(|a| a.method).collect();
    let mut md = format!(
        "| student | {} |\n|---|{}\n",
        methods.iter().map(|m| m.label()).collect::<Vec<_>>().join(" | "),
        "---|".repeat(methods.len())
    );
    for c in &report.comparisons {
        let s = report.model(&c.student).expect("compared student exists");
        let cmp = if member { &c.member } else { &c.aggregate };
        let mut row = format!("| {} |", c.student);
        for &m in &methods {
            let (t, v) = (teacher.attack(m).unwrap(), s.attack(m).unwrap());
            let (tv, sv) = if member { (t.tpr, v.tpr) } else { (t.accuracy, v.accuracy) };
            let w = cmp.cells.iter().find(|(n, _)| n == m.name()).map(|c| c.1).unwrap_or(Winner::Tie);
            let _ = writeln!(csv, "{},{},{:.6},{:.6},{}", c.student, m.name(), tv, sv, mark(w));
            let (tb, sb) = match w {
                Winner::Teacher => ("**", ""),
                Winner::Student => ("", "**"),
                Winner::Tie => ("", ""),
            };
            let _ = write!(row, " {tb}{tv:.3}{tb} / {sb}{sv:.3}{sb} |");
        }
        md.push_str(&row);
        md.push('\n');
        let _ = writeln!(
            md,
            "| | teacher lower {}, student lower {}, ties {} |{}",
            cmp.teacher_lower,
            cmp.student_lower,
            cmp.ties,
            " |".repeat(methods.len().saturating_sub(1))
        );
    }
    (csv, md)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Writes CSV and Markdown tables plus `statistics.json` under `report/`.
pub fn write_report(layout: &Layout, report: &Report) -> Result<(), PipelineError> {
    let dir = layout.report_dir();
    let (agg_csv, agg_md) = grid(report, false);
    let (mem_csv, mem_md) = grid(report, true);
    write(&dir.join("aggregate.csv"), &agg_csv)?;
    write(&dir.join("member.csv"), &mem_csv)?;

    let mut strat = String::from("model,attack,accuracy,tpr,tnr,vulnerable_tpr,nonvulnerable_tpr\n");
    let mut ppl = String::from("model,members,nonmembers,vulnerable,nonvulnerable\n");
    let mut ppl_md = String::from("| model | members | non-members | vulnerable | non-vulnerable |\n|---|---|---|---|---|\n");
    for m in &report.models {
        for a in &m.attacks {
            let _ = writeln!(
                strat,
                "{},{},{:.6},{:.6},{:.6},{},{}",
                m.name,
                a.method.name(),
                a.accuracy,
                a.tpr,
                a.tnr,
                opt(a.vulnerable_tpr),
                opt(a.nonvulnerable_tpr)
            );
        }
        let p = &m.perplexity;
        let _ = writeln!(
            ppl,
            "{},{:.6},{:.6},{},{}",
            m.name,
            p.members,
            p.nonmembers,
            opt(p.vulnerable),
            opt(p.nonvulnerable)
        );
        let _ = writeln!(
            ppl_md,
            "| {} | {:.3} | {:.3} | {} | {} |",
            m.name,
            p.members,
            p.nonmembers,
            p.vulnerable.map(|x| format!("{x:.3}")).unwrap_or("-".into()),
            p.nonvulnerable.map(|x| format!("{x:.3}")).unwrap_or("-".into())
        );
    }
    write(&dir.join("stratified.csv"), &strat)?;
    write(&dir.join("perplexity.csv"), &ppl)?;

    let mut red = String::from("name,baseline,variant,percent\n");
    for r in &report.reductions {
        let _ = writeln!(red, "{},{},{},{:.4}", r.name, r.baseline, r.variant, r.percent);
    }
    write(&dir.join("reductions.csv"), &red)?;

    let mut md = String::from("# Report\n\n## Aggregate accuracy, teacher / student\n\n");
    md.push_str(&agg_md);
    md.push_str("\n## Member-specific accuracy (TPR), teacher / student\n\n");
    md.push_str(&mem_md);
    md.push_str("\n## Perplexity\n\n");
    md.push_str(&ppl_md);
    md.push_str("\n## Sign tests (pooled over students)\n\n");
    for (label, t) in [("aggregate", &report.pooled_aggregate), ("member", &report.pooled_member)] {
        for (conv, r) in [("teacher higher", &t.teacher_higher), ("teacher lower", &t.teacher_lower)] {
            if let Some(r) = r {
                let _ = writeln!(
                    md,
                    "- {label}, {conv}: {} of {} non-tied cells, p = {:.4}",
                    r.n_successes, r.n_nonties, r.p_value
                );
            }
        }
    }
    md.push_str("\n## Relative reductions\n\n");
    for r in &report.reductions {
        let _ = writeln!(md, "- {}: {:.2}%", r.name, r.percent);
    }
    md.push_str("\n## Directional checks\n\n");
    for c in &report.checks {
        let _ = writeln!(md, "- [{}] {}: {} ({})", if c.holds { "x" } else { " " }, c.id, c.description, c.detail);
    }
    write(&dir.join("report.md"), &md)?;
    write_json(&dir.join("statistics.json"), report)
}

/// Top-level run record: hashes of the config and inputs, every derived
/// seed and the report. Holds no timing, so reruns compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub input_hash: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub report: Report,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, layout: &Layout, report: Report) -> Result<Self, PipelineError> {
        let mut inputs = Vec::new();
        for p in [layout.corpus(), layout.manifest()] {
            inputs.extend(fs::read(&p).map_err(|e| PipelineError::io(&p, e))?);
        }
        Ok(Self {
            config_hash: cfg.hash(),
            input_hash: sha256_hex(&inputs),
            master_seed: cfg.seed,
            seeds: derived_seeds(cfg),
            report,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, PipelineError> {
        read_json(path)
    }
}
