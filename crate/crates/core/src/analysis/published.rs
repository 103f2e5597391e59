//! Published accuracy tables, kept as data so the statistics code can be
//! checked against the reported aggregates without any trained model.

use serde::Serialize;

use super::stats::{compare_pair, relative_reduction, sign_test, PairComparison, Winner};
use super::AnalysisError;

pub const ATTACKS: [&str; 6] = ["ReCaLL", "Loss", "Zlib", "Min-K", "Min-K++", "Ref"];

/// One teacher/student row: `(teacher, student)` accuracies per attack and
/// the side printed in bold (`T`, `S`, or `-` for none).
pub struct PairRow {
    pub teacher: &'static str,
    pub student: &'static str,
    pub cells: [(f64, f64); 6],
    pub bold: &'static str,
}

pub const AGGREGATE_PAIRS: [PairRow; 6] = [
    PairRow {
        teacher: "Pythia",
        student: "DistilPythia",
        cells: [(0.555, 0.565), (0.442, 0.444), (0.613, 0.635), (0.316, 0.414), (0.501, 0.501), (0.648, 0.579)],
        bold: "TTTT-S",
    },
    PairRow {
        teacher: "Gemma 2 27B",
        student: "Gemma 2 2B",
        cells: [(0.667, 0.667), (0.494, 0.525), (0.556, 0.481), (0.543, 0.556), (0.537, 0.451), (0.494, 0.420)],
        bold: "-TSTSS",
    },
    PairRow {
        teacher: "Gemma 2 27B",
        student: "Gemma 2 2B Distilled",
        cells: [(0.667, 0.494), (0.494, 0.537), (0.556, 0.556), (0.543, 0.580), (0.537, 0.432), (0.494, 0.426)],
        bold: "ST-TSS",
    },
    PairRow {
        teacher: "Gemma 2 27B",
        student: "Gemma 2 9B",
        cells: [(0.667, 0.704), (0.494, 0.475), (0.556, 0.531), (0.543, 0.543), (0.537, 0.481), (0.494, 0.426)],
        bold: "TSS-SS",
    },
    PairRow {
        teacher: "Llama 3.1 8B",
        student: "Llama 3.2 1B",
        cells: [(0.702, 0.682), (0.303, 0.311), (0.552, 0.532), (0.300, 0.309), (0.311, 0.335), (0.441, 0.349)],
        bold: "STSTTS",
    },
    PairRow {
        teacher: "Llama 3.1 8B",
        student: "Llama 3.2 3B",
        cells: [(0.702, 0.806), (0.303, 0.314), (0.552, 0.538), (0.300, 0.311), (0.311, 0.205), (0.441, 0.381)],
        bold: "TTSTSS",
    },
];

pub const MEMBER_PAIRS: [PairRow; 6] = [
    PairRow {
        teacher: "Pythia",
        student: "DistilPythia",
        cells: [(0.658, 0.673), (0.631, 0.630), (0.234, 0.290), (0.444, 0.683), (0.993, 0.993), (0.620, 0.636)],
        bold: "TSTT-T",
    },
    PairRow {
        teacher: "Gemma 2 27B",
        student: "Gemma 2 2B",
        cells: [(0.615, 0.670), (0.606, 0.661), (0.156, 0.037), (0.761, 0.495), (0.688, 0.404), (0.780, 0.376)],
        bold: "TTSSSS",
    },
    PairRow {
        teacher: "Gemma 2 27B",
        student: "Gemma 2 2B Distilled",
        cells: [(0.615, 0.532), (0.606, 0.716), (0.156, 0.101), (0.761, 0.376), (0.688, 0.771), (0.780, 0.358)],
        bold: "STSSTS",
    },
    PairRow {
        teacher: "Gemma 2 27B",
        student: "Gemma 2 9B",
        cells: [(0.615, 0.459), (0.606, 0.505), (0.156, 0.165), (0.761, 0.633), (0.688, 0.450), (0.780, 0.339)],
        bold: "SSTSSS",
    },
    PairRow {
        teacher: "Llama 3.1 8B",
        student: "Llama 3.2 1B",
        cells: [(0.968, 0.937), (0.451, 0.513), (0.497, 0.567), (0.447, 0.508), (0.486, 0.604), (0.563, 0.563)],
        bold: "STTTT-",
    },
    PairRow {
        teacher: "Llama 3.1 8B",
        student: "Llama 3.2 3B",
        cells: [(0.968, 0.974), (0.451, 0.510), (0.497, 0.515), (0.447, 0.502), (0.486, 0.320), (0.563, 0.563)],
        bold: "TTTTST",
    },
];

/// Non-vulnerable-only vs full-data student, per evaluation subset.
#[allow(clippy::approx_constant)]
pub mod selection {
    pub const VULNERABLE_NONVUL: [f64; 6] = [0.250, 0.205, 0.114, 0.364, 0.318, 0.114];
    pub const VULNERABLE_FULL: [f64; 6] = [1.000, 1.000, 0.977, 0.818, 0.864, 1.000];
    pub const NONVULNERABLE_NONVUL: [f64; 6] = [1.000, 0.976, 0.976, 0.952, 0.929, 1.000];
    pub const NONVULNERABLE_FULL: [f64; 6] = [1.000, 0.952, 0.452, 0.833, 0.905, 1.000];
    pub const MEMBER_NONVUL: [f64; 6] = [0.593, 0.556, 0.432, 0.630, 0.593, 0.519];
    pub const MEMBER_FULL: [f64; 6] = [1.000, 0.975, 0.556, 0.827, 0.889, 1.000];
    pub const NONMEMBER_NONVUL: [f64; 6] = [0.963, 0.988, 0.988, 0.877, 0.914, 1.000];
    pub const NONMEMBER_FULL: [f64; 6] = [0.963, 0.975, 1.000, 0.914, 0.877, 1.000];
}

/// Architecture variants of the student, member and non-member subsets.
pub mod architecture {
    pub const MEMBER_NONE: [f64; 6] = [1.000, 1.000, 0.802, 1.000, 0.951, 1.000];
    pub const MEMBER_BOTTLENECK: [f64; 6] = [0.802, 0.951, 0.667, 0.926, 0.901, 0.975];
    pub const MEMBER_NONORM: [f64; 6] = [0.988, 1.000, 0.728, 0.926, 0.852, 1.000];
    pub const MEMBER_ALL: [f64; 6] = [1.000, 1.000, 0.667, 0.938, 0.914, 1.000];
    pub const NONMEMBER_NONE: [f64; 6] = [0.963, 0.988, 1.000, 0.926, 0.963, 1.000];
    pub const NONMEMBER_BOTTLENECK: [f64; 6] = [0.926, 0.975, 1.000, 0.951, 0.926, 1.000];
    pub const NONMEMBER_NONORM: [f64; 6] = [1.000, 0.988, 1.000, 0.988, 0.988, 1.000];
    pub const NONMEMBER_ALL: [f64; 6] = [1.000, 0.988, 1.000, 0.963, 0.914, 1.000];
}

/// Bottleneck dimensions of the published ablation.
pub const ABLATION_DIMS: [usize; 5] = [48, 96, 192, 384, 768];
/// Hidden size of the student the published sweep was run on.
pub const ABLATION_HIDDEN: usize = 768;

/// Rescales the published ablation dimensions to another hidden size.
pub fn rescaled_ablation_dims(hidden: usize) -> Vec<usize> {
    ABLATION_DIMS
        .iter()
        .map(|&b| (b * hidden / ABLATION_HIDDEN).max(1))
        .collect()
}

fn table(values: &[f64]) -> Vec<(String, f64)> {
    ATTACKS.iter().map(|a| a.to_string()).zip(values.iter().copied()).collect()
}

/// Exact numeric comparison of every published pair.
pub fn compare_grid(rows: &[PairRow]) -> Result<PairComparison, AnalysisError> {
    let parts: Result<Vec<PairComparison>, AnalysisError> = rows
        .iter()
        .map(|r| {
            let t: Vec<f64> = r.cells.iter().map(|c| c.0).collect();
            let s: Vec<f64> = r.cells.iter().map(|c| c.1).collect();
            let mut c = compare_pair(&table(&t), &table(&s))?;
            for (name, _) in &mut c.cells {
                *name = format!("{} / {}: {name}", r.teacher, r.student);
            }
            Ok(c)
        })
        .collect();
    Ok(PairComparison::merge(&parts?))
}

/// Tally of the bold markers as printed.
pub fn bold_tally(rows: &[PairRow]) -> (u64, u64, u64) {
    let mut out = (0, 0, 0);
    for c in rows.iter().flat_map(|r| r.bold.chars()) {
        match c {
            'T' => out.0 += 1,
            'S' => out.1 += 1,
            _ => out.2 += 1,
        }
    }
    out
}

/// Cells whose bold marker disagrees with the numeric comparison.
pub fn bold_disagreements(rows: &[PairRow]) -> Vec<String> {
    let mut out = Vec::new();
    for r in rows {
        for ((attack, &(t, s)), mark) in ATTACKS.iter().zip(&r.cells).zip(r.bold.chars()) {
            let numeric = if t < s {
                Winner::Teacher
            } else if s < t {
                Winner::Student
            } else {
                Winner::Tie
            };
            let printed = match mark {
                'T' => Winner::Teacher,
                'S' => Winner::Student,
                _ => Winner::Tie,
            };
            if numeric != printed {
                out.push(format!("{} / {} {attack}: {t:.3} / {s:.3} marked {mark}", r.teacher, r.student));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub expected: f64,
    pub got: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckLine {
    fn new(name: &str, expected: f64, got: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            expected,
            got,
            tolerance,
            pass: (expected - got).abs() <= tolerance,
        }
    }
}

/// Runs the published tables through the statistics code and compares with
/// the aggregates reported alongside them. Reductions are in percent.
pub fn self_check() -> Result<Vec<CheckLine>, AnalysisError> {
    use architecture as a;
    use selection as s;
    let pct = |b: &[f64], v: &[f64]| relative_reduction(b, v).map(|r| 100.0 * r);
    let mut lines = vec![
        CheckLine::new("reduction member none->bottleneck (%)", 9.45, pct(&a::MEMBER_NONE, &a::MEMBER_BOTTLENECK)?, 0.05),
        CheckLine::new("reduction member none->nonorm (%)", 4.71, pct(&a::MEMBER_NONE, &a::MEMBER_NONORM)?, 0.05),
        CheckLine::new("reduction member none->all (%)", 4.49, pct(&a::MEMBER_NONE, &a::MEMBER_ALL)?, 0.05),
        CheckLine::new(
            "reduction non-member none->bottleneck (%)",
            1.05,
            pct(&a::NONMEMBER_NONE, &a::NONMEMBER_BOTTLENECK)?,
            0.05,
        ),
        CheckLine::new("reduction non-member none->nonorm (%)", -2.19, pct(&a::NONMEMBER_NONE, &a::NONMEMBER_NONORM)?, 0.05),
        CheckLine::new("reduction non-member none->all (%)", -0.46, pct(&a::NONMEMBER_NONE, &a::NONMEMBER_ALL)?, 0.05),
        CheckLine::new("reduction vulnerable full->nonvulnerable (%)", 75.02, pct(&s::VULNERABLE_FULL, &s::VULNERABLE_NONVUL)?, 0.05),
        CheckLine::new("reduction member full->nonvulnerable (%)", 35.20, pct(&s::MEMBER_FULL, &s::MEMBER_NONVUL)?, 0.05),
    ];

    let agg = compare_grid(&AGGREGATE_PAIRS)?;
    lines.push(CheckLine::new("aggregate grid: teacher lower", 15.0, agg.teacher_lower as f64, 0.0));
    lines.push(CheckLine::new("aggregate grid: student lower", 17.0, agg.student_lower as f64, 0.0));
    lines.push(CheckLine::new("aggregate grid: ties", 4.0, agg.ties as f64, 0.0));
    lines.push(CheckLine::new(
        "aggregate grid sign test p",
        0.430,
        agg.sign_test_teacher_higher()?.p_value,
        0.001,
    ));

    // The member-specific counts in the text follow the bold markers, which
    // bold one tied cell; the numeric comparison is reported separately.
    let (t, st, ties) = bold_tally(&MEMBER_PAIRS);
    lines.push(CheckLine::new("member grid (bold markers): teacher lower", 18.0, t as f64, 0.0));
    lines.push(CheckLine::new("member grid (bold markers): student lower", 16.0, st as f64, 0.0));
    lines.push(CheckLine::new("member grid (bold markers): ties", 2.0, ties as f64, 0.0));
    lines.push(CheckLine::new(
        "member grid sign test p (18 of 34)",
        0.432,
        sign_test(34, 18)?.p_value,
        0.001,
    ));
    Ok(lines)
}
