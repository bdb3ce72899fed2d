//! Speaker selection for the separation baseline and SiSNR-improvement
//! reporting by pair type.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::corpus::{LoadedMixture, PairType};
use crate::error::{Error, Result};
use crate::loss::sisnr;
use crate::model::{Model, ModelKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMethod {
    Oracle,
    Cosine,
}

impl SelectMethod {
    pub fn name(self) -> &'static str {
        match self {
            SelectMethod::Oracle => "oracle",
            SelectMethod::Cosine => "cosine",
        }
    }
}

impl fmt::Display for SelectMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SelectMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SelectMethod::Oracle),
            "cosine" => Ok(SelectMethod::Cosine),
            _ => Err(Error::InvalidArgument(format!("selection `{s}` (expected oracle|cosine)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionResult {
    /// 1 or 2.
    pub chosen_index: usize,
    /// Winning score minus the other one; never negative.
    pub score_gap: f64,
    pub method: SelectMethod,
}

fn pick(s1: f64, s2: f64, method: SelectMethod) -> SelectionResult {
    // ties go to the first output
    let (chosen_index, score_gap) = if s2 > s1 { (2, s2 - s1) } else { (1, s1 - s2) };
    SelectionResult {
        chosen_index,
        score_gap,
        method,
    }
}

/// Output with the higher SiSNR against the target.
pub fn oracle_select(x1: &[f64], x2: &[f64], target: &[f64]) -> Result<SelectionResult> {
    if x1.len() != x2.len() {
        return Err(Error::LengthMismatch(x1.len(), x2.len()));
    }
    Ok(pick(sisnr(target, x1)?, sisnr(target, x2)?, SelectMethod::Oracle))
}

/// Output whose auxiliary-network embedding is closest in cosine to the
/// adaptation utterance's. `aux` must be an extraction model.
pub fn cosine_select(x1: &[f64], x2: &[f64], adaptation: &[f64], aux: &Model) -> Result<SelectionResult> {
    let ea = aux.embed(adaptation)?;
    let c1 = aux.embed(x1)?.cosine(&ea);
    let c2 = aux.embed(x2)?.cosine(&ea);
    Ok(pick(c1, c2, SelectMethod::Cosine))
}

/// How the separation baseline's outputs are reduced to one.
#[derive(Clone, Copy, Debug)]
pub enum Selector<'a> {
    Oracle,
    Cosine(&'a Model),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordResult {
    pub mixture_id: String,
    pub pair_type: PairType,
    /// SiSNR of the unprocessed first-microphone mixture.
    pub sisnr_in: f64,
    pub sisnr_out: f64,
    pub improvement: f64,
    pub selection: Option<SelectionResult>,
    /// Whether the selection matched the oracle choice.
    pub selection_correct: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TableRow {
    pub count: usize,
    pub mean: f64,
    /// Fraction of records with improvement <= 0 dB.
    pub failure_rate: f64,
}

/// Mean improvement per pair type plus the count-weighted average.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable {
    pub rows: Vec<(PairType, TableRow)>,
    pub avg: TableRow,
}

fn row(values: &[f64]) -> TableRow {
    let count = values.len();
    if count == 0 {
        return TableRow {
            count,
            mean: f64::NAN,
            failure_rate: f64::NAN,
        };
    }
    TableRow {
        count,
        mean: values.iter().sum::<f64>() / count as f64,
        failure_rate: values.iter().filter(|&&v| v <= 0.0).count() as f64 / count as f64,
    }
}

impl PairTable {
    pub fn from_records(records: &[RecordResult]) -> Self {
        let of = |t: Option<PairType>| -> Vec<f64> {
            records
                .iter()
                .filter(|r| t.is_none_or(|t| r.pair_type == t))
                .map(|r| r.improvement)
                .collect()
        };
        PairTable {
            rows: PairType::ALL.iter().map(|&t| (t, row(&of(Some(t))))).collect(),
            avg: row(&of(None)),
        }
    }

    pub fn get(&self, t: PairType) -> TableRow {
        self.rows.iter().find(|(p, _)| *p == t).expect("all pair types present").1
    }

    /// Count-weighted mean over AA and BB.
    pub fn same_family_mean(&self) -> f64 {
        let (aa, bb) = (self.get(PairType::AA), self.get(PairType::BB));
        let n = aa.count + bb.count;
        if n == 0 {
            return f64::NAN;
        }
        let part = |r: TableRow| if r.count == 0 { 0.0 } else { r.mean * r.count as f64 };
        (part(aa) + part(bb)) / n as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("pair_type\tcount\tmean_sisnri_db\tfailure_rate\n");
        let rows = self.rows.iter().map(|(t, r)| (t.name(), r)).chain([("avg", &self.avg)]);
        for (name, r) in rows {
            let _ = writeln!(s, "{name}\t{}\t{:.4}\t{:.4}", r.count, r.mean, r.failure_rate);
        }
        s
    }
}

impl fmt::Display for PairTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", "")?;
        for (t, _) in &self.rows {
            write!(f, "{:>9}", t.name())?;
        }
        writeln!(f, "{:>9}", "avg")?;
        let cell = |r: &TableRow| if r.count == 0 { "-".to_string() } else { format!("{:.2}", r.mean) };
        write!(f, "{:>8}", "SiSNRi")?;
        for (_, r) in &self.rows {
            write!(f, "{:>9}", cell(r))?;
        }
        writeln!(f, "{:>9}", cell(&self.avg))?;
        write!(f, "{:>8}", "count")?;
        for (_, r) in &self.rows {
            write!(f, "{:>9}", r.count)?;
        }
        writeln!(f, "{:>9}", self.avg.count)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// `(bin_low, [count_AA, count_BB, count_AB])`, ascending and contiguous.
    pub bins: Vec<(f64, [usize; 3])>,
    /// Per pair type, in `PairType::ALL` order.
    pub failure_rate: [f64; 3],
}

/// Bins improvements into `[k w, (k + 1) w)` per pair type.
pub fn histogram_report(values: &[(PairType, f64)], bin_width_db: f64) -> Result<Histogram> {
    if !(bin_width_db > 0.0 && bin_width_db.is_finite()) {
        return Err(Error::InvalidArgument(format!("bin width {bin_width_db} must be > 0")));
    }
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram"));
    }
    let idx = |v: f64| (v / bin_width_db).floor() as i64;
    let lo = values.iter().map(|&(_, v)| idx(v)).min().expect("nonempty");
    let hi = values.iter().map(|&(_, v)| idx(v)).max().expect("nonempty");
    let mut bins: Vec<(f64, [usize; 3])> = (lo..=hi).map(|k| (k as f64 * bin_width_db, [0; 3])).collect();
    let col = |t: PairType| PairType::ALL.iter().position(|&p| p == t).expect("known type");
    let mut totals = [0usize; 3];
    let mut fails = [0usize; 3];
    for &(t, v) in values {
        bins[(idx(v) - lo) as usize].1[col(t)] += 1;
        totals[col(t)] += 1;
        if v <= 0.0 {
            fails[col(t)] += 1;
        }
    }
    let failure_rate = std::array::from_fn(|i| {
        if totals[i] == 0 {
            f64::NAN
        } else {
            fails[i] as f64 / totals[i] as f64
        }
    });
    Ok(Histogram {
        bin_width: bin_width_db,
        bins,
        failure_rate,
    })
}

impl Histogram {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_low\tcount_AA\tcount_BB\tcount_AB\n");
        for (low, c) in &self.bins {
            let _ = writeln!(s, "{low}\t{}\t{}\t{}", c[0], c[1], c[2]);
        }
        s
    }
}

/// Per-record results with their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<RecordResult>,
    pub table: PairTable,
    pub selector: Option<SelectMethod>,
}

pub const DEFAULT_BIN_WIDTH_DB: f64 = 2.0;

impl EvalReport {
    pub fn histogram(&self, bin_width_db: f64) -> Result<Histogram> {
        let v: Vec<(PairType, f64)> = self.records.iter().map(|r| (r.pair_type, r.improvement)).collect();
        histogram_report(&v, bin_width_db)
    }

    /// Fraction of records whose selection agreed with the oracle.
    pub fn selection_accuracy(&self) -> Option<f64> {
        let judged: Vec<bool> = self.records.iter().filter_map(|r| r.selection_correct).collect();
        (!judged.is_empty()).then(|| judged.iter().filter(|&&c| c).count() as f64 / judged.len() as f64)
    }

    pub fn records_tsv(&self) -> String {
        let mut s = String::from("mixture_id\tpair_type\tsisnr_in\tsisnr_out\tsisnri\tselect\tchosen\tscore_gap\n");
        for r in &self.records {
            let (m, c, g) = match r.selection {
                Some(sel) => (sel.method.name(), sel.chosen_index.to_string(), sel.score_gap.to_string()),
                None => ("-", "-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{m}\t{c}\t{g}",
                r.mixture_id, r.pair_type, r.sisnr_in, r.sisnr_out, r.improvement
            );
        }
        s
    }

    /// Writes `table.tsv`, `histogram.tsv` and `records.tsv` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, bin_width_db: f64) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("table.tsv", self.table.to_tsv()),
            ("histogram.tsv", self.histogram(bin_width_db)?.to_tsv()),
            ("records.tsv", self.records_tsv()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Checks that a model can consume mixtures with `channels` microphones.
pub fn check_layout(model: &Model, channels: usize) -> Result<()> {
    let cfg = model.config();
    if cfg.kind != ModelKind::Passthrough && cfg.channels() != channels {
        return Err(Error::TopologyMismatch(format!(
            "model (ipd_mode={}) expects {}-channel mixtures, data has {channels}",
            cfg.ipd_mode,
            cfg.channels()
        )));
    }
    Ok(())
}

/// Runs `model` on every mixture and scores it against the target.
/// Separation models need a selector; extraction models ignore it.
pub fn evaluate(model: &Model, data: &[LoadedMixture], selector: Selector) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut records = Vec::with_capacity(data.len());
    let is_sep = model.config().kind == ModelKind::TasNet;
    for m in data {
        check_layout(model, m.mixture.num_channels())?;
        let target = m.target();
        let sisnr_in = sisnr(target, m.mixture.channel(0))?;
        let (estimate, selection, correct) = if is_sep {
            let [x1, x2] = model.separate(&m.mixture)?;
            let oracle = oracle_select(&x1, &x2, target)?;
            let sel = match selector {
                Selector::Oracle => oracle,
                Selector::Cosine(aux) => cosine_select(&x1, &x2, &m.adaptation, aux)?,
            };
            let est = if sel.chosen_index == 1 { x1 } else { x2 };
            (est, Some(sel), Some(sel.chosen_index == oracle.chosen_index))
        } else {
            (model.extract(&m.mixture, &m.adaptation)?, None, None)
        };
        let sisnr_out = sisnr(target, &estimate)?;
        records.push(RecordResult {
            mixture_id: m.record.mixture_id.clone(),
            pair_type: m.record.pair_type,
            sisnr_in,
            sisnr_out,
            improvement: sisnr_out - sisnr_in,
            selection,
            selection_correct: correct,
        });
    }
    let table = PairTable::from_records(&records);
    let selector = is_sep.then_some(match selector {
        Selector::Oracle => SelectMethod::Oracle,
        Selector::Cosine(_) => SelectMethod::Cosine,
    });
    Ok(EvalReport {
        records,
        table,
        selector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn oracle_rules() {
        let t = noise(200, 1);
        let other = noise(200, 2);
        assert_eq!(oracle_select(&t, &other, &t).unwrap().chosen_index, 1);
        let scaled: Vec<f64> = t.iter().map(|v| 0.7 * v).collect();
        let sel = oracle_select(&other, &scaled, &t).unwrap();
        assert_eq!(sel.chosen_index, 2);
        assert!(sel.score_gap > 0.0);
        let tie = oracle_select(&other, &other, &t).unwrap();
        assert_eq!((tie.chosen_index, tie.score_gap), (1, 0.0));
    }

    #[test]
    fn histogram_partition() {
        let v = [
            (PairType::AA, 3.0),
            (PairType::AA, -1.0),
            (PairType::BB, 7.5),
            (PairType::AB, 0.0),
        ];
        let h = histogram_report(&v, 2.0).unwrap();
        let sum: [usize; 3] = h.bins.iter().fold([0; 3], |a, (_, c)| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
        assert_eq!(sum, [2, 1, 1]);
        assert_eq!(h.bins.first().unwrap().0, -2.0);
        assert_eq!(h.failure_rate[0], 0.5);
        assert_eq!(h.failure_rate[2], 1.0);
        let single = histogram_report(&[(PairType::AB, 4.2); 5], 1.0).unwrap();
        assert_eq!(single.bins.len(), 1);
        assert!(histogram_report(&[], 1.0).is_err());
        assert!(histogram_report(&v, 0.0).is_err());
    }

    #[test]
    fn table_weights_by_count() {
        let rec = |t, v: f64| RecordResult {
            mixture_id: String::new(),
            pair_type: t,
            sisnr_in: 0.0,
            sisnr_out: v,
            improvement: v,
            selection: None,
            selection_correct: None,
        };
        let r = [rec(PairType::AA, 1.0), rec(PairType::AA, 3.0), rec(PairType::AB, 8.0)];
        let t = PairTable::from_records(&r);
        assert_eq!(t.get(PairType::AA).mean, 2.0);
        assert_eq!(t.avg.mean, 4.0);
        assert_eq!(t.same_family_mean(), 2.0);
        assert_eq!(t.get(PairType::BB).count, 0);
    }
}
