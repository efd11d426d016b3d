use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::{ProbeKind, ResidencyLevel};
use crate::error::{Error, Result};

/// Per-processor behavior of one probe instruction against an L1i-resident
/// line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    /// Timing difference caused by an SMC machine clear (●).
    Smc,
    /// Timing difference without an SMC machine clear (◐).
    Timing,
    /// No exploitable timing difference (○).
    None,
    /// Instruction not available (×).
    Unsupported,
}

impl Support {
    pub fn symbol(self) -> char {
        match self {
            Support::Smc => '●',
            Support::Timing => '◐',
            Support::None => '○',
            Support::Unsupported => '×',
        }
    }

    pub fn is_available(self) -> bool {
        self != Support::Unsupported
    }

    pub fn leaks(self) -> bool {
        matches!(self, Support::Smc | Support::Timing)
    }
}

impl fmt::Display for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Support::Smc => "smc",
            Support::Timing => "timing",
            Support::None => "none",
            Support::Unsupported => "unsupported",
        };
        f.write_str(name)
    }
}

impl FromStr for Support {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "smc" | "●" => Ok(Support::Smc),
            "timing" | "◐" => Ok(Support::Timing),
            "none" | "○" => Ok(Support::None),
            "unsupported" | "×" | "x" => Ok(Support::Unsupported),
            other => Err(Error::Profile(format!("unknown support class `{other}`"))),
        }
    }
}

/// Applicability of each probe instruction on each shipped processor.
#[derive(Debug, Clone)]
pub struct SupportTable {
    processors: Vec<String>,
    cells: BTreeMap<String, BTreeMap<ProbeKind, Support>>,
}

const APPLICABILITY_CSV: &str = include_str!("../../profiles/applicability.csv");

impl SupportTable {
    /// Parses a table with one row per probe kind and one column per
    /// processor.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("kind") {
            return Err(Error::Profile("applicability table must start with `kind`".into()));
        }
        let processors: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
        let mut cells: BTreeMap<String, BTreeMap<ProbeKind, Support>> = processors
            .iter()
            .map(|p| (p.clone(), BTreeMap::new()))
            .collect();
        for record in reader.records() {
            let record = record?;
            let kind: ProbeKind = record[0].parse()?;
            for (proc_name, cell) in processors.iter().zip(record.iter().skip(1)) {
                cells.get_mut(proc_name).unwrap().insert(kind, cell.parse()?);
            }
        }
        for (proc_name, row) in &cells {
            if row.len() != ProbeKind::ALL.len() {
                return Err(Error::Profile(format!(
                    "applicability table lists {} of 9 kinds for {proc_name}",
                    row.len()
                )));
            }
        }
        Ok(SupportTable { processors, cells })
    }

    /// The table for the ten shipped processors.
    pub fn builtin() -> &'static SupportTable {
        static TABLE: OnceLock<SupportTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            SupportTable::from_csv(APPLICABILITY_CSV).expect("shipped applicability table is valid")
        })
    }

    pub fn processors(&self) -> &[String] {
        &self.processors
    }

    pub fn get(&self, processor: &str, kind: ProbeKind) -> Option<Support> {
        self.cells.get(processor).and_then(|row| row.get(&kind)).copied()
    }

    pub fn row(&self, processor: &str) -> Option<&BTreeMap<ProbeKind, Support>> {
        self.cells.get(processor)
    }
}

/// Base latencies (cycles) of one probe instruction by where the line was.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KindLatency {
    pub l1i: u32,
    /// Latency when the access raises an SMC machine clear.
    #[serde(default)]
    pub l1i_smc: Option<u32>,
    pub l1d: u32,
    pub l2: u32,
    pub llc: u32,
    pub dram: u32,
    /// Entries estimated from neighboring values rather than measured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interpolated: Vec<String>,
}

impl KindLatency {
    pub fn at(&self, level: ResidencyLevel) -> u32 {
        match level {
            ResidencyLevel::L1i => self.l1i,
            ResidencyLevel::L1d => self.l1d,
            ResidencyLevel::L2 => self.l2,
            ResidencyLevel::Llc => self.llc,
            ResidencyLevel::Dram => self.dram,
        }
    }
}

/// Timing and behavior of one processor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub name: String,
    /// Standard deviation of the Gaussian timing noise, in cycles.
    pub noise_sigma: f64,
    /// Resolution of the timestamp counter, in cycles.
    pub timer_granularity: u32,
    /// Relative standard deviation of the duration of victim operations.
    #[serde(default)]
    pub op_jitter: f64,
    /// Expected preemptions of a spinning thread per million wait cycles.
    #[serde(default)]
    pub interrupt_rate: f64,
    /// Mean length of one preemption, in cycles.
    #[serde(default)]
    pub interrupt_cycles: u64,
    /// Cycles the sibling thread loses per SMC machine clear.
    pub sibling_stall: u64,
    /// Cycles consumed by one iteration of an empty wait loop.
    pub cycles_per_loop_iteration: u64,
    /// Minimum distance between an SMC-hit latency and the LLC latency of
    /// the same instruction.
    pub separability_gap: u32,
    pub latency: BTreeMap<ProbeKind, KindLatency>,
    /// Per-kind support; taken from the shipped applicability table when
    /// omitted.
    #[serde(default)]
    pub support: BTreeMap<ProbeKind, Support>,
}

macro_rules! builtin_profiles {
    ($($name:literal),* $(,)?) => {
        const BUILTIN: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../../profiles/", $name, ".toml")))),*
        ];
    };
}

builtin_profiles!(
    "intel-westmere-ep",
    "intel-sandy-bridge",
    "intel-ivy-bridge",
    "intel-broadwell",
    "intel-ice-lake",
    "intel-cascade-lake",
    "intel-comet-lake",
    "amd-ryzen5",
    "amd-epyc-7232p",
    "intel-tiger-lake",
);

impl LatencyProfile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut profile: LatencyProfile = toml::from_str(text)?;
        if profile.support.is_empty() {
            let row = SupportTable::builtin().row(&profile.name).ok_or_else(|| {
                Error::Profile(format!(
                    "profile `{}` has no [support] table and is not a shipped processor",
                    profile.name
                ))
            })?;
            profile.support = row.clone();
        }
        profile.validate()?;
        Ok(profile)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Names of the shipped profiles.
    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(name, _)| *name)
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::UnknownProfile(name.to_owned()))?;
        Self::from_toml_str(text)
    }

    /// Resolves a shipped name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if BUILTIN.iter().any(|(n, _)| *n == name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::from_file(path);
        }
        Err(Error::UnknownProfile(name_or_path.to_owned()))
    }

    /// The same processor with a different timing noise level.
    pub fn with_noise(&self, sigma: f64) -> Self {
        LatencyProfile {
            noise_sigma: sigma,
            ..self.clone()
        }
    }

    /// The same processor with timing noise and operation jitter removed.
    pub fn noiseless(&self) -> Self {
        LatencyProfile {
            noise_sigma: 0.0,
            op_jitter: 0.0,
            interrupt_rate: 0.0,
            ..self.clone()
        }
    }

    pub fn support(&self, kind: ProbeKind) -> Support {
        self.support[&kind]
    }

    pub fn triggers_smc(&self, kind: ProbeKind) -> bool {
        self.support(kind) == Support::Smc
    }

    pub fn kind_latency(&self, kind: ProbeKind) -> &KindLatency {
        &self.latency[&kind]
    }

    /// Noise-free latency of `kind` against a line observed at `level`.
    pub fn base_cycles(&self, kind: ProbeKind, level: ResidencyLevel, smc: bool) -> u32 {
        let lat = self.kind_latency(kind);
        if smc {
            lat.l1i_smc.expect("validated: SMC kinds carry an SMC latency")
        } else {
            lat.at(level)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Profile(format!("{}: {msg}", self.name)));
        if self.name.is_empty() {
            return fail("empty name".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        if !(self.op_jitter >= 0.0 && self.op_jitter < 1.0) {
            return fail(format!("op_jitter {} must be in [0, 1)", self.op_jitter));
        }
        if !(self.interrupt_rate >= 0.0 && self.interrupt_rate.is_finite()) {
            return fail(format!("interrupt_rate {} must be finite and >= 0", self.interrupt_rate));
        }
        if self.timer_granularity == 0 {
            return fail("timer_granularity must be >= 1".into());
        }
        if self.cycles_per_loop_iteration == 0 {
            return fail("cycles_per_loop_iteration must be >= 1".into());
        }
        for kind in ProbeKind::ALL {
            let Some(lat) = self.latency.get(&kind) else {
                return fail(format!("missing latency table for {kind}"));
            };
            let Some(support) = self.support.get(&kind) else {
                return fail(format!("missing support entry for {kind}"));
            };
            for level in ResidencyLevel::ALL {
                if lat.at(level) == 0 {
                    return fail(format!("{kind} latency at {level} must be > 0"));
                }
            }
            if *support == Support::Smc {
                let Some(smc) = lat.l1i_smc else {
                    return fail(format!("{kind} triggers SMC but has no l1i_smc latency"));
                };
                if smc < lat.llc + self.separability_gap {
                    return fail(format!(
                        "{kind} SMC latency {smc} is within {} cycles of LLC latency {}",
                        self.separability_gap, lat.llc
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_shipped_profiles_load() {
        let names: Vec<_> = LatencyProfile::builtin_names().collect();
        assert_eq!(names.len(), 10);
        for name in names {
            let p = LatencyProfile::builtin(name).unwrap();
            assert_eq!(p.name, name);
        }
    }

    #[test]
    fn applicability_table_covers_shipped_profiles() {
        let table = SupportTable::builtin();
        assert_eq!(table.processors().len(), 10);
        for name in LatencyProfile::builtin_names() {
            assert!(table.row(name).is_some(), "{name}");
        }
    }

    #[test]
    fn cascade_lake_flush_smc_latency() {
        let p = LatencyProfile::builtin("intel-cascade-lake").unwrap();
        assert_eq!(p.base_cycles(ProbeKind::Flush, ResidencyLevel::L1i, true), 350);
        assert_eq!(p.sibling_stall, 235);
        assert!(p.triggers_smc(ProbeKind::Store));
        assert!(!p.triggers_smc(ProbeKind::Load));
    }

    #[test]
    fn amd_timer_is_coarse() {
        let p = LatencyProfile::builtin("amd-ryzen5").unwrap();
        assert_eq!(p.timer_granularity, 21);
        assert_eq!(p.support(ProbeKind::Clwb), Support::None);
    }

    #[test]
    fn unknown_profile_is_an_error() {
        assert!(matches!(
            LatencyProfile::builtin("pentium-4"),
            Err(Error::UnknownProfile(_))
        ));
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut text = BUILTIN[5].1.to_owned();
        text.insert_str(0, "bogus_key = 1\n");
        assert!(LatencyProfile::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_inseparable_smc_latency() {
        let mut p = LatencyProfile::builtin("intel-cascade-lake").unwrap();
        p.latency.get_mut(&ProbeKind::Store).unwrap().l1i_smc = Some(120);
        assert!(p.validate().is_err());
    }

    #[test]
    fn rejects_zero_latency() {
        let mut p = LatencyProfile::builtin("intel-cascade-lake").unwrap();
        p.latency.get_mut(&ProbeKind::Load).unwrap().l2 = 0;
        assert!(p.validate().is_err());
    }
}
