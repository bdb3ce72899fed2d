use std::fs;
use std::path::{Path, PathBuf};

use super::speaker::PairType;
use crate::dsp::{wav_read, AudioSignal};
use crate::error::{Error, Result};

pub const MANIFEST_FIELDS: [&str; 11] = [
    "mixture_id",
    "mixture_path",
    "src1_path",
    "src2_path",
    "adapt_path",
    "target_spk",
    "interferer_spk",
    "snr_db",
    "pair_type",
    "delay1",
    "delay2",
];

/// One manifest line. Paths are relative to the manifest's directory
/// unless absolute. `src1` is the target, `src2` the interferer.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRecord {
    pub mixture_id: String,
    pub mixture_path: PathBuf,
    pub src1_path: PathBuf,
    pub src2_path: PathBuf,
    pub adapt_path: PathBuf,
    pub target_spk: String,
    pub interferer_spk: String,
    /// Target-to-interferer power ratio at the first microphone.
    pub snr_db: f64,
    pub pair_type: PairType,
    pub delays: [usize; 2],
}

impl MixtureRecord {
    fn to_line(&self) -> String {
        [
            self.mixture_id.clone(),
            path_field(&self.mixture_path),
            path_field(&self.src1_path),
            path_field(&self.src2_path),
            path_field(&self.adapt_path),
            self.target_spk.clone(),
            self.interferer_spk.clone(),
            // shortest repr that parses back to the same f64
            format!("{}", self.snr_db),
            self.pair_type.to_string(),
            self.delays[0].to_string(),
            self.delays[1].to_string(),
        ]
        .join("\t")
    }

    fn parse(line: &str, lineno: usize) -> Result<Self> {
        let err = |msg: String| Error::Manifest { line: lineno, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != MANIFEST_FIELDS.len() {
            return Err(err(format!(
                "expected {} tab-separated fields, found {}",
                MANIFEST_FIELDS.len(),
                f.len()
            )));
        }
        let num = |i: usize| -> Result<usize> {
            f[i].parse()
                .map_err(|_| err(format!("{}: bad integer `{}`", MANIFEST_FIELDS[i], f[i])))
        };
        let snr_db = f[7]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(format!("snr_db: bad number `{}`", f[7])))?;
        let pair_type = f[8]
            .parse()
            .map_err(|_| err(format!("pair_type: `{}`", f[8])))?;
        Ok(MixtureRecord {
            mixture_id: f[0].to_string(),
            mixture_path: f[1].into(),
            src1_path: f[2].into(),
            src2_path: f[3].into(),
            adapt_path: f[4].into(),
            target_spk: f[5].to_string(),
            interferer_spk: f[6].to_string(),
            snr_db,
            pair_type,
            delays: [num(9)?, num(10)?],
        })
    }
}

fn path_field(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

pub fn manifest_to_string(records: &[MixtureRecord]) -> String {
    let mut out = format!("#{}\n", MANIFEST_FIELDS.join("\t"));
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<MixtureRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| MixtureRecord::parse(l, i + 1))
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[MixtureRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

/// A manifest plus the directory its relative paths hang off.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub base: PathBuf,
    pub records: Vec<MixtureRecord>,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_manifest(&text)?;
        if records.is_empty() {
            return Err(Error::EmptyInput("manifest"));
        }
        Ok(Manifest {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Reads every wav a record points at.
    pub fn load(&self, rec: &MixtureRecord) -> Result<LoadedMixture> {
        let mixture = wav_read(self.resolve(&rec.mixture_path))?;
        let mono = |p: &Path| -> Result<Vec<f64>> {
            Ok(wav_read(self.resolve(p))?.into_channels().swap_remove(0))
        };
        let target = mono(&rec.src1_path)?;
        let interferer = mono(&rec.src2_path)?;
        let adaptation = mono(&rec.adapt_path)?;
        if target.len() != mixture.len() {
            return Err(Error::LengthMismatch(mixture.len(), target.len()));
        }
        if interferer.len() != mixture.len() {
            return Err(Error::LengthMismatch(mixture.len(), interferer.len()));
        }
        Ok(LoadedMixture {
            record: rec.clone(),
            mixture,
            sources: [target, interferer],
            adaptation,
        })
    }

    pub fn load_all(&self) -> Result<Vec<LoadedMixture>> {
        self.records.iter().map(|r| self.load(r)).collect()
    }
}

/// Audio for one manifest record.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedMixture {
    pub record: MixtureRecord,
    pub mixture: AudioSignal,
    /// Target then interferer, as seen at the first microphone.
    pub sources: [Vec<f64>; 2],
    pub adaptation: Vec<f64>,
}

impl LoadedMixture {
    pub fn target(&self) -> &[f64] {
        &self.sources[0]
    }
}
