//! Dataset directories and the CSV formats for queries and tracks.
//!
//! ```text
//! DIR/manifest.json
//! DIR/<sequence>/sequence.json     sensor size and time span
//! DIR/<sequence>/frames.csv        index,t_us,file
//! DIR/<sequence>/frames/NNNNNN.pgm
//! DIR/<sequence>/events.bin
//! DIR/<sequence>/queries.csv       id,t_us,x,y
//! DIR/<sequence>/gt.csv            track_id,t_us,x,y
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::image::{quantize, Image};
use crate::metrics::GtTrack;
use crate::pipeline::{Recording, Track};
use crate::query::QuerySpec;
use crate::synth::{generate_sample, SynthConfig, SynthSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub frame_rate_hz: f64,
    pub dt_track_us: u64,
    pub duration_us: u64,
    pub seed: u64,
    pub sequences: Vec<String>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceInfo {
    width: usize,
    height: usize,
    t_begin_us: u64,
    t_end_us: u64,
}

/// One recording with its queries and (possibly empty) ground truth.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<(u64, Image)>,
    pub events: EventStream,
    pub t_begin: u64,
    pub t_end: u64,
    pub queries: Vec<QuerySpec>,
    pub gt: Vec<GtTrack>,
}

impl Sequence {
    /// Frames are stored at 8 bits, so they are quantized here to match what
    /// a reader of the written dataset sees.
    pub fn from_sample(name: impl Into<String>, s: SynthSample) -> Self {
        let frames = s
            .frames
            .into_iter()
            .map(|(t, mut img)| {
                img.data.iter_mut().for_each(|v| *v = quantize(*v) as f32 / 255.0);
                (t, img)
            })
            .collect();
        Self {
            name: name.into(),
            frames,
            events: s.events,
            t_begin: 0,
            t_end: s.scene.duration_us,
            queries: s.queries,
            gt: s.gt,
        }
    }

    pub fn recording(&self) -> Recording<'_> {
        Recording { frames: &self.frames, events: &self.events, t_begin: self.t_begin, t_end: self.t_end }
    }

    pub fn width(&self) -> usize {
        self.events.width()
    }

    pub fn height(&self) -> usize {
        self.events.height()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("frames"))?;
        let info = SequenceInfo { width: self.width(), height: self.height(), t_begin_us: self.t_begin, t_end_us: self.t_end };
        fs::write(dir.join("sequence.json"), serde_json::to_string_pretty(&info)? + "\n")?;
        let mut index = csv::Writer::from_path(dir.join("frames.csv"))?;
        index.write_record(["index", "t_us", "file"])?;
        for (i, (t, img)) in self.frames.iter().enumerate() {
            let file = format!("frames/{i:06}.pgm");
            img.write_pnm(&dir.join(&file))?;
            index.write_record([i.to_string(), t.to_string(), file])?;
        }
        index.flush()?;
        self.events.write_binary(&dir.join("events.bin"))?;
        write_queries(&dir.join("queries.csv"), &self.queries)?;
        let gt: Vec<Track> = self.gt.iter().map(|g| Track { id: g.id, samples: g.samples.clone() }).collect();
        write_tracks(&dir.join("gt.csv"), &gt)?;
        Ok(())
    }

    /// Reads a sequence directory; `gt.csv` is optional.
    pub fn read(dir: &Path) -> Result<Self> {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let info_path = dir.join("sequence.json");
        let info: SequenceInfo = serde_json::from_str(&read_text(&info_path)?)
            .map_err(|e| Error::format(&info_path, e.to_string()))?;
        let mut frames = Vec::new();
        let index_path = dir.join("frames.csv");
        let mut rdr = csv::Reader::from_reader(open(&index_path)?);
        for row in rdr.records() {
            let row = row?;
            let t: u64 = row
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::format(&index_path, format!("bad row {:?}", row)))?;
            let file = row.get(2).ok_or_else(|| Error::format(&index_path, "missing file column"))?;
            frames.push((t, Image::read_pnm(&dir.join(file.trim()))?));
        }
        if frames.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::format(&index_path, "frame timestamps must increase"));
        }
        let events = EventStream::read_binary(&dir.join("events.bin"))?;
        if (events.width(), events.height()) != (info.width, info.height) {
            return Err(Error::format(dir.join("events.bin"), "sensor size differs from sequence.json"));
        }
        let queries = read_queries(&dir.join("queries.csv"))?;
        let gt_path = dir.join("gt.csv");
        let gt = if gt_path.exists() { read_gt(&gt_path)? } else { Vec::new() };
        Ok(Self { name, frames, events, t_begin: info.t_begin_us, t_end: info.t_end_us, queries, gt })
    }
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::format(path, e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn sequence_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Generates `scenes` sequences named `seq_000`, `seq_001`, ... The scene
/// seeds derive from `seed` so every sequence is reproducible on its own.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, scenes: usize) -> Result<(DatasetManifest, Vec<Sequence>)> {
    cfg.validate()?;
    let mut seqs = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let scene_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        seqs.push(Sequence::from_sample(format!("seq_{i:03}"), generate_sample(cfg, scene_seed)?));
    }
    let manifest = DatasetManifest {
        width: cfg.width,
        height: cfg.height,
        frame_rate_hz: cfg.frame_rate_hz,
        dt_track_us: cfg.dt_track_us,
        duration_us: cfg.duration_us,
        seed,
        sequences: seqs.iter().map(|s| s.name.clone()).collect(),
        synth: cfg.clone(),
    };
    Ok((manifest, seqs))
}

pub fn write_dataset(root: &Path, manifest: &DatasetManifest, seqs: &[Sequence]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::format(root, format!("cannot create directory: {e}")))?;
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")
        .map_err(|e| Error::format(root, format!("cannot write manifest: {e}")))?;
    for s in seqs {
        s.write(&sequence_dir(root, &s.name))?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::format(root, "dataset directory does not exist"));
    }
    let path = root.join("manifest.json");
    serde_json::from_str(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<Sequence>)> {
    let manifest = read_manifest(root)?;
    let seqs = manifest.sequences.iter().map(|n| Sequence::read(&sequence_dir(root, n))).collect::<Result<Vec<_>>>()?;
    Ok((manifest, seqs))
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::format(path, format!("line {line}: cannot parse `{field}`")))
}

fn data_rows(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // an optional header row is recognised by a non-numeric first field
        if i == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields, got {}", i + 1, rec.len())));
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

/// `id,t_us,x,y`, header optional.
pub fn read_queries(path: &Path) -> Result<Vec<QuerySpec>> {
    data_rows(path)?
        .into_iter()
        .map(|(line, r)| {
            Ok(QuerySpec {
                id: parse_num(path, line, &r[0])?,
                t_us: parse_num(path, line, &r[1])?,
                x: parse_num(path, line, &r[2])?,
                y: parse_num(path, line, &r[3])?,
            })
        })
        .collect()
}

pub fn write_queries(path: &Path, queries: &[QuerySpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "t_us", "x", "y"])?;
    for q in queries {
        w.write_record([q.id.to_string(), q.t_us.to_string(), format!("{:.3}", q.x), format!("{:.3}", q.y)])?;
    }
    w.flush()?;
    Ok(())
}

/// `track_id,t_us,x,y` with three decimals, rows ordered by id then time.
pub fn write_tracks(path: &Path, tracks: &[Track]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["track_id", "t_us", "x", "y"])?;
    let mut sorted: Vec<&Track> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.id);
    for t in sorted {
        for &(ts, x, y) in &t.samples {
            w.write_record([t.id.to_string(), ts.to_string(), format!("{x:.3}"), format!("{y:.3}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<Track>> {
    let mut by_id: std::collections::BTreeMap<u64, Vec<(u64, f32, f32)>> = Default::default();
    for (line, r) in data_rows(path)? {
        by_id.entry(parse_num(path, line, &r[0])?).or_default().push((
            parse_num(path, line, &r[1])?,
            parse_num(path, line, &r[2])?,
            parse_num(path, line, &r[3])?,
        ));
    }
    let mut out = Vec::with_capacity(by_id.len());
    for (id, mut samples) in by_id {
        samples.sort_by_key(|s| s.0);
        if samples.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::format(path, format!("track {id} repeats a timestamp")));
        }
        out.push(Track { id, samples });
    }
    Ok(out)
}

pub fn read_gt(path: &Path) -> Result<Vec<GtTrack>> {
    Ok(read_tracks(path)?.into_iter().map(|t| GtTrack::new(t.id, t.samples)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queries_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        fs::write(&p, "id,t_us,x,y\n3,0,1.5,2\n").unwrap();
        assert_eq!(read_queries(&p).unwrap(), vec![QuerySpec { id: 3, t_us: 0, x: 1.5, y: 2.0 }]);
        fs::write(&p, "3, 0, 1.5, 2\n4,10,0,0\n").unwrap();
        assert_eq!(read_queries(&p).unwrap().len(), 2);
        fs::write(&p, "3,0,1.5\n").unwrap();
        assert!(matches!(read_queries(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn track_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let tracks = vec![Track { id: 1, samples: vec![(0, 1.25, 2.5), (5000, 3.0, 4.125)] }];
        write_tracks(&p, &tracks).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "track_id,t_us,x,y\n1,0,1.250,2.500\n1,5000,3.000,4.125\n");
        assert_eq!(read_tracks(&p).unwrap(), tracks);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SynthConfig { duration_us: 30_000, ..SynthConfig::default() };
        let (m, seqs) = generate_dataset(&cfg, 7, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &m, &seqs).unwrap();
        let (m2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.len(), 2);
        for (a, b) in seqs.iter().zip(&back) {
            assert_eq!(a.frames, b.frames);
            assert_eq!(a.events, b.events);
            assert_eq!(a.queries.len(), b.queries.len());
            assert_eq!((a.t_begin, a.t_end), (b.t_begin, b.t_end));
            assert_eq!(a.gt.len(), b.gt.len());
        }
    }

    #[test]
    fn missing_directory_is_reported() {
        let e = read_dataset(Path::new("/nonexistent/fetap")).unwrap_err();
        assert!(e.to_string().contains("does not exist"));
    }
}
