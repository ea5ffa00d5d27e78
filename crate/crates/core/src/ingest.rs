//! Sample, labels and metadata CSV ingestion.
//!
//! Sample files carry three columns (`time`, `mass`, `intensity`) matched by
//! header name, case-insensitively and in any order. Rows holding non-finite
//! or out-of-domain values are skipped and counted; a cell that does not
//! parse as a number aborts the file with its line number.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{GcmsError, Result};
use crate::NUM_LABELS;

/// One detected-ion reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IonReading {
    pub time_minutes: f64,
    pub mass_mz: f64,
    pub intensity: f64,
}

impl IonReading {
    pub fn new(time_minutes: f64, mass_mz: f64, intensity: f64) -> Self {
        Self {
            time_minutes,
            mass_mz,
            intensity,
        }
    }

    /// All fields finite, time and intensity non-negative, mass positive.
    pub fn is_valid(&self) -> bool {
        self.time_minutes.is_finite()
            && self.mass_mz.is_finite()
            && self.intensity.is_finite()
            && self.time_minutes >= 0.0
            && self.mass_mz > 0.0
            && self.intensity >= 0.0
    }
}

/// Sample-preparation flag from the metadata table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Derivatized {
    Yes,
    No,
    #[default]
    Unknown,
}

impl FromStr for Derivatized {
    type Err = GcmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "1.0" | "true" | "yes" => Ok(Self::Yes),
            "0" | "0.0" | "false" | "no" => Ok(Self::No),
            "" | "nan" | "unknown" => Ok(Self::Unknown),
            other => Err(GcmsError::invalid(format!(
                "derivatized value `{other}` is not one of 0, 1 or empty"
            ))),
        }
    }
}

impl fmt::Display for Derivatized {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Yes => "1",
            Self::No => "0",
            Self::Unknown => "",
        })
    }
}

/// A single sample's readings, sorted ascending by time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub sample_id: String,
    pub readings: Vec<IonReading>,
    pub derivatized: Derivatized,
}

impl RawSample {
    /// Builds a sample from arbitrary readings. Invalid readings are
    /// dropped, the rest sorted by time. Fails if nothing valid remains.
    pub fn new(
        sample_id: impl Into<String>,
        readings: impl IntoIterator<Item = IonReading>,
        derivatized: Derivatized,
    ) -> Result<Self> {
        let sample_id = sample_id.into();
        let mut readings: Vec<IonReading> =
            readings.into_iter().filter(IonReading::is_valid).collect();
        if readings.is_empty() {
            return Err(GcmsError::EmptySample { origin: sample_id });
        }
        sort_readings(&mut readings);
        Ok(Self {
            sample_id,
            readings,
            derivatized,
        })
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }
}

// Stable sort: ties keep file order.
fn sort_readings(readings: &mut [IonReading]) {
    readings.sort_by(|a, b| a.time_minutes.total_cmp(&b.time_minutes));
}

/// Nine nonexclusive binary targets, ordered as the manifest's label names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct LabelVector(pub [bool; NUM_LABELS]);

impl LabelVector {
    pub fn as_f64(&self) -> [f64; NUM_LABELS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    /// Number of positive labels.
    pub fn cardinality(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = GcmsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(GcmsError::invalid(format!(
                "split `{other}` is not one of train, val, test"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Sample CSV path relative to the dataset root.
    pub path: PathBuf,
    pub derivatized: Derivatized,
    pub labels: Option<LabelVector>,
    pub split: Split,
}

/// Joined labels + metadata tables.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub label_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

/// A sample with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample: RawSample,
    pub labels: LabelVector,
}

impl DatasetManifest {
    pub fn entry(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }

    pub fn labeled(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.labels.is_some())
    }

    /// Ground truth keyed by sample id, for every labeled entry.
    pub fn label_map(&self) -> HashMap<String, LabelVector> {
        self.entries
            .iter()
            .filter_map(|e| e.labels.map(|l| (e.sample_id.clone(), l)))
            .collect()
    }

    /// Parses the sample file behind `entry` and attaches its metadata.
    pub fn load_sample(&self, root: &Path, entry: &ManifestEntry) -> Result<RawSample> {
        let mut sample = parse_sample_csv(root.join(&entry.path))?;
        sample.sample_id = entry.sample_id.clone();
        sample.derivatized = entry.derivatized;
        Ok(sample)
    }

    /// Loads every labeled entry accepted by `keep`, in manifest order.
    pub fn load_labeled(
        &self,
        root: &Path,
        keep: impl Fn(&ManifestEntry) -> bool + Sync,
    ) -> Result<Vec<LabeledSample>> {
        let picked: Vec<&ManifestEntry> = self.labeled().filter(|e| keep(e)).collect();
        picked
            .par_iter()
            .map(|e| {
                Ok(LabeledSample {
                    sample: self.load_sample(root, e)?,
                    labels: e.labels.expect("filtered on labels"),
                })
            })
            .collect()
    }
}

/// Parses one sample CSV. The sample id is the file stem.
pub fn parse_sample_csv(path: impl AsRef<Path>) -> Result<RawSample> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GcmsError::io(path, e))?;
    let sample_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (sample, rejected) = read_sample_csv(file, &sample_id, &path.display().to_string())?;
    if rejected > 0 {
        log::warn!(
            "{}: skipped {rejected} non-finite or out-of-range rows",
            path.display()
        );
    }
    Ok(sample)
}

/// Reads sample readings from any CSV source. Returns the sample and the
/// number of rows skipped for non-finite or out-of-domain values.
pub fn read_sample_csv<R: Read>(
    source: R,
    sample_id: &str,
    origin: &str,
) -> Result<(RawSample, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| GcmsError::MissingColumn {
                origin: origin.to_string(),
                column: name.to_string(),
            })
    };
    let (ti, mi, ii) = (column("time")?, column("mass")?, column("intensity")?);

    let mut readings = Vec::new();
    let mut rejected = 0;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| GcmsError::Row {
                origin: origin.to_string(),
                line,
                message: format!("{name} value `{raw}` is not a number"),
            })
        };
        let reading = IonReading::new(cell(ti, "time")?, cell(mi, "mass")?, cell(ii, "intensity")?);
        if reading.is_valid() {
            readings.push(reading);
        } else {
            rejected += 1;
        }
    }
    if readings.is_empty() {
        return Err(GcmsError::EmptySample {
            origin: origin.to_string(),
        });
    }
    sort_readings(&mut readings);
    Ok((
        RawSample {
            sample_id: sample_id.to_string(),
            readings,
            derivatized: Derivatized::Unknown,
        },
        rejected,
    ))
}

/// Writes readings as `time,mass,intensity` with shortest round-trip floats.
pub fn write_sample_csv<W: Write>(sample: &RawSample, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["time", "mass", "intensity"])?;
    for r in &sample.readings {
        writer.write_record([
            r.time_minutes.to_string(),
            r.mass_mz.to_string(),
            r.intensity.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| GcmsError::io("<csv sink>", e))?;
    Ok(())
}

/// Reads `labels.csv` and `metadata.csv` and joins them on `sample_id`.
///
/// Metadata may carry an optional `path` column; without it each sample is
/// expected at `samples/<sample_id>.csv` under the dataset root.
pub fn parse_manifest(
    labels_path: impl AsRef<Path>,
    metadata_path: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let labels_path = labels_path.as_ref();
    let metadata_path = metadata_path.as_ref();
    let labels = File::open(labels_path).map_err(|e| GcmsError::io(labels_path, e))?;
    let metadata = File::open(metadata_path).map_err(|e| GcmsError::io(metadata_path, e))?;
    read_manifest(
        labels,
        &labels_path.display().to_string(),
        metadata,
        &metadata_path.display().to_string(),
    )
}

pub fn read_manifest<L: Read, M: Read>(
    labels: L,
    labels_origin: &str,
    metadata: M,
    metadata_origin: &str,
) -> Result<DatasetManifest> {
    let (label_names, label_rows) = read_labels(labels, labels_origin)?;

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(metadata);
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let require = |name: &str| {
        find(name).ok_or_else(|| GcmsError::MissingColumn {
            origin: metadata_origin.to_string(),
            column: name.to_string(),
        })
    };
    let (id_col, deriv_col, split_col) = (
        require("sample_id")?,
        require("derivatized")?,
        require("split")?,
    );
    let path_col = find("path");

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| GcmsError::Row {
            origin: metadata_origin.to_string(),
            line,
            message,
        };
        let sample_id = record.get(id_col).unwrap_or("").to_string();
        if sample_id.is_empty() {
            return Err(row_err("empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(GcmsError::DuplicateId(sample_id));
        }
        let derivatized = record
            .get(deriv_col)
            .unwrap_or("")
            .parse()
            .map_err(|e: GcmsError| row_err(e.to_string()))?;
        let split = record
            .get(split_col)
            .unwrap_or("")
            .parse()
            .map_err(|e: GcmsError| row_err(e.to_string()))?;
        let path = path_col
            .and_then(|c| record.get(c))
            .filter(|p| !p.is_empty())
            .map(PathBuf::from)
            .unwrap_or_else(|| default_sample_path(&sample_id));
        let labels = label_rows.get(&sample_id).copied();
        entries.push(ManifestEntry {
            sample_id,
            path,
            derivatized,
            labels,
            split,
        });
    }
    if let Some(orphan) = label_rows.keys().find(|id| !seen.contains(*id)) {
        return Err(GcmsError::UnknownSample(orphan.clone()));
    }
    Ok(DatasetManifest {
        label_names,
        entries,
    })
}

/// Relative location of a sample file when metadata has no `path` column.
pub fn default_sample_path(sample_id: &str) -> PathBuf {
    Path::new("samples").join(format!("{sample_id}.csv"))
}

fn read_labels<R: Read>(
    source: R,
    origin: &str,
) -> Result<(Vec<String>, HashMap<String, LabelVector>)> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if !headers
        .get(0)
        .is_some_and(|h| h.eq_ignore_ascii_case("sample_id"))
    {
        return Err(GcmsError::MissingColumn {
            origin: origin.to_string(),
            column: "sample_id".into(),
        });
    }
    let label_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if label_names.len() != NUM_LABELS {
        return Err(GcmsError::Row {
            origin: origin.to_string(),
            line: 1,
            message: format!(
                "header names {} labels, expected {NUM_LABELS}",
                label_names.len()
            ),
        });
    }

    let mut rows = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |message: String| GcmsError::Row {
            origin: origin.to_string(),
            line,
            message,
        };
        let sample_id = record.get(0).unwrap_or("").to_string();
        if record.len() != NUM_LABELS + 1 {
            return Err(row_err(format!(
                "sample `{sample_id}` has {} label values, expected {NUM_LABELS}",
                record.len().saturating_sub(1)
            )));
        }
        let mut values = [false; NUM_LABELS];
        for (k, value) in values.iter_mut().enumerate() {
            *value = match record.get(k + 1) {
                Some("0") => false,
                Some("1") => true,
                other => {
                    return Err(row_err(format!(
                        "label value `{}` is not 0 or 1",
                        other.unwrap_or("")
                    )))
                }
            };
        }
        if rows
            .insert(sample_id.clone(), LabelVector(values))
            .is_some()
        {
            return Err(GcmsError::DuplicateId(sample_id));
        }
    }
    Ok((label_names, rows))
}

/// Writes `labels.csv` rows for every labeled entry, in manifest order.
pub fn write_labels_csv<W: Write>(manifest: &DatasetManifest, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    let mut header = vec!["sample_id".to_string()];
    header.extend(manifest.label_names.iter().cloned());
    writer.write_record(&header)?;
    for entry in manifest.labeled() {
        let labels = entry.labels.expect("labeled");
        let mut row = vec![entry.sample_id.clone()];
        row.extend(
            labels
                .0
                .iter()
                .map(|&b| if b { "1" } else { "0" }.to_string()),
        );
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| GcmsError::io("<csv sink>", e))?;
    Ok(())
}

/// Writes `metadata.csv` (`sample_id,derivatized,split`).
pub fn write_metadata_csv<W: Write>(manifest: &DatasetManifest, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["sample_id", "derivatized", "split"])?;
    for entry in &manifest.entries {
        writer.write_record([
            entry.sample_id.clone(),
            entry.derivatized.to_string(),
            entry.split.to_string(),
        ])?;
    }
    writer.flush().map_err(|e| GcmsError::io("<csv sink>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str) -> Result<(RawSample, usize)> {
        read_sample_csv(text.as_bytes(), "S0", "test.csv")
    }

    const LABELS_HEADER: &str = "sample_id,a,b,c,d,e,f,g,h,i\n";

    #[test]
    fn sorts_readings_by_time() {
        let (s, rejected) = read("time,mass,intensity\n0.1,18.02,5.0\n0.05,17.9,2.0\n").unwrap();
        assert_eq!(rejected, 0);
        assert_eq!(
            s.readings,
            vec![
                IonReading::new(0.05, 17.9, 2.0),
                IonReading::new(0.1, 18.02, 5.0)
            ]
        );
    }

    #[test]
    fn matches_columns_by_name_in_any_order() {
        let (s, _) = read("Intensity,TIME,Mass\n7,1.5,44\n").unwrap();
        assert_eq!(s.readings, vec![IonReading::new(1.5, 44.0, 7.0)]);
    }

    #[test]
    fn preserves_single_mass_peak_verbatim() {
        // Water trace at m/z 18 shaped as one peak.
        let rows: Vec<(f64, f64, f64)> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, 18.0, 1000.0 * (-(t - 2.5).powi(2)).exp())
            })
            .collect();
        let mut text = String::from("time,mass,intensity\n");
        for (t, m, v) in &rows {
            text.push_str(&format!("{t},{m},{v}\n"));
        }
        let (s, _) = read(&text).unwrap();
        assert_eq!(s.len(), rows.len());
        for (r, (t, m, v)) in s.readings.iter().zip(&rows) {
            assert_eq!((r.time_minutes, r.mass_mz, r.intensity), (*t, *m, *v));
        }
    }

    #[test]
    fn header_only_is_empty_sample() {
        assert!(matches!(
            read("time,mass,intensity\n"),
            Err(GcmsError::EmptySample { .. })
        ));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = read("time,mass\n1,2\n").unwrap_err();
        assert!(
            matches!(err, GcmsError::MissingColumn { ref column, .. } if column == "intensity")
        );
    }

    #[test]
    fn unparsable_cell_reports_line() {
        let err = read("time,mass,intensity\n1,2,3\n1,abc,3\n").unwrap_err();
        assert!(matches!(err, GcmsError::Row { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_finite_rows_are_skipped_and_counted() {
        let (s, rejected) =
            read("time,mass,intensity\n1,18,NaN\n2,18,inf\n3,18,-1\n4,18,5\n").unwrap();
        assert_eq!(rejected, 3);
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn all_rows_non_finite_is_empty_sample() {
        assert!(matches!(
            read("time,mass,intensity\n1,18,NaN\n"),
            Err(GcmsError::EmptySample { .. })
        ));
    }

    #[test]
    fn manifest_joins_labels_and_metadata() {
        let labels = format!("{LABELS_HEADER}S1,1,0,0,0,0,0,0,0,0\n");
        let meta = "sample_id,derivatized,split\nS1,1,train\nS2,,test\n";
        let m = read_manifest(labels.as_bytes(), "l", meta.as_bytes(), "m").unwrap();
        assert_eq!(m.label_names.len(), 9);
        let s1 = m.entry("S1").unwrap();
        let mut expect = [false; 9];
        expect[0] = true;
        assert_eq!(s1.labels, Some(LabelVector(expect)));
        assert_eq!(s1.derivatized, Derivatized::Yes);
        assert_eq!(s1.path, Path::new("samples/S1.csv"));
        let s2 = m.entry("S2").unwrap();
        assert_eq!(s2.labels, None);
        assert_eq!(s2.derivatized, Derivatized::Unknown);
        assert_eq!(s2.split, Split::Test);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let labels = format!("{LABELS_HEADER}S1,1,0,0,0,0,0,0,0,0\nS1,0,0,0,0,0,0,0,0,0\n");
        let meta = "sample_id,derivatized,split\nS1,1,train\n";
        let err = read_manifest(labels.as_bytes(), "l", meta.as_bytes(), "m").unwrap_err();
        assert!(matches!(err, GcmsError::DuplicateId(ref id) if id == "S1"));

        let labels = LABELS_HEADER.to_string();
        let meta = "sample_id,derivatized,split\nS1,1,train\nS1,0,train\n";
        let err = read_manifest(labels.as_bytes(), "l", meta.as_bytes(), "m").unwrap_err();
        assert!(matches!(err, GcmsError::DuplicateId(_)));
    }

    #[test]
    fn wrong_label_count_and_values_are_rejected() {
        let meta = "sample_id,derivatized,split\nS1,1,train\n";
        let short = format!("{LABELS_HEADER}S1,1,0,0\n");
        assert!(read_manifest(short.as_bytes(), "l", meta.as_bytes(), "m").is_err());
        let bad = format!("{LABELS_HEADER}S1,2,0,0,0,0,0,0,0,0\n");
        assert!(read_manifest(bad.as_bytes(), "l", meta.as_bytes(), "m").is_err());
        let header8 = "sample_id,a,b,c,d,e,f,g,h\n";
        assert!(read_manifest(header8.as_bytes(), "l", meta.as_bytes(), "m").is_err());
    }

    #[test]
    fn labels_without_metadata_are_rejected() {
        let labels = format!("{LABELS_HEADER}S9,1,0,0,0,0,0,0,0,0\n");
        let meta = "sample_id,derivatized,split\nS1,1,train\n";
        let err = read_manifest(labels.as_bytes(), "l", meta.as_bytes(), "m").unwrap_err();
        assert!(matches!(err, GcmsError::UnknownSample(_)));
    }

    #[test]
    fn derivatized_and_split_parsing() {
        assert_eq!("1".parse::<Derivatized>().unwrap(), Derivatized::Yes);
        assert_eq!("0.0".parse::<Derivatized>().unwrap(), Derivatized::No);
        assert_eq!("".parse::<Derivatized>().unwrap(), Derivatized::Unknown);
        assert!("2".parse::<Derivatized>().is_err());
        assert!("holdout".parse::<Split>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn reading() -> impl Strategy<Value = IonReading> {
            (0.0..50.0f64, 1.0..400.0f64, 0.0..1e9f64)
                .prop_map(|(t, m, v)| IonReading::new(t, m, v))
        }

        proptest! {
            #[test]
            fn csv_round_trip_is_exact(readings in prop::collection::vec(reading(), 1..200)) {
                let sample = RawSample::new("S", readings, Derivatized::Unknown).unwrap();
                let mut buf = Vec::new();
                write_sample_csv(&sample, &mut buf).unwrap();
                let (back, rejected) = read_sample_csv(buf.as_slice(), "S", "mem").unwrap();
                prop_assert_eq!(rejected, 0);
                prop_assert_eq!(&back.readings, &sample.readings);
                // Same bytes, same sample.
                let (again, _) = read_sample_csv(buf.as_slice(), "S", "mem").unwrap();
                prop_assert_eq!(again, back);
            }
        }
    }
}
