use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use super::{cramers_v, read_tensor, write_tensor, SampleRecord, Split, TaskData, TaskStream};

pub const METADATA_HEADER: [&str; 6] = ["id", "path", "label", "attribute", "task", "split"];

/// One validation failure. `row` is the 1-based data row (the header is row 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read metadata {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed metadata: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata header must be `{}`, found `{0}`", METADATA_HEADER.join(","))]
    Header(String),
    #[error("{} validation error(s):\n{}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<RowError>),
}

fn load_image(path: &Path, shape: (usize, usize, usize)) -> Result<Vec<f32>, String> {
    if path.extension().is_some_and(|e| e == "bin") {
        let (found, data) = read_tensor(path).map_err(|e| e.to_string())?;
        if found != shape {
            return Err(format!("tensor shape {found:?} does not match {shape:?}"));
        }
        return Ok(data);
    }
    let (c, h, w) = shape;
    let img = image::open(path).map_err(|e| format!("cannot decode {}: {e}", path.display()))?;
    let img = img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle);
    let mut out = vec![0f32; c * h * w];
    match c {
        1 => {
            let g = img.to_luma8();
            for (i, p) in g.pixels().enumerate() {
                out[i] = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    out[ch * h * w + i] = p.0[ch] as f32 / 255.0;
                }
            }
        }
        _ => return Err(format!("unsupported channel count {c} for image files")),
    }
    Ok(out)
}

/// Loads a task stream from `metadata_path` (header `id,path,label,attribute,task,split`),
/// resolving image paths against `root_dir`. Every problem is collected before failing.
pub fn ingest_csv(root_dir: &Path, metadata_path: &Path, input_shape: (usize, usize, usize)) -> Result<TaskStream, IngestError> {
    let file = std::fs::File::open(metadata_path).map_err(|source| IngestError::Io { path: metadata_path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != METADATA_HEADER {
        return Err(IngestError::Header(header.join(",")));
    }

    let mut errors = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut class_task: BTreeMap<usize, (u32, usize)> = BTreeMap::new();
    let mut tasks: BTreeMap<u32, TaskData> = BTreeMap::new();
    let mut max_attr = 0usize;

    for (i, row) in reader.records().enumerate() {
        let rowno = i + 1;
        let mut err = |m: String| errors.push(RowError { row: rowno, message: m });
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                err(format!("unreadable: {e}"));
                continue;
            }
        };
        if row.len() != 6 {
            err(format!("expected 6 fields, found {}", row.len()));
            continue;
        }
        let field = |k: usize| row.get(k).unwrap_or("").trim();
        let id = field(0).parse::<u64>().map_err(|_| format!("invalid id `{}`", field(0)));
        let label = field(2).parse::<usize>().map_err(|_| format!("invalid label `{}`", field(2)));
        let attribute = field(3).parse::<usize>().map_err(|_| format!("invalid attribute `{}`", field(3)));
        let task = match field(4).parse::<u32>() {
            Ok(t) if t >= 1 => Ok(t),
            _ => Err(format!("invalid task `{}` (task ids start at 1)", field(4))),
        };
        let split = Split::parse(field(5)).ok_or_else(|| format!("unknown split `{}` (expected train, val or test)", field(5)));
        let mut bad = false;
        for e in [&id.as_ref().err(), &label.as_ref().err(), &attribute.as_ref().err(), &task.as_ref().err(), &split.as_ref().err()]
            .into_iter()
            .flatten()
        {
            err((*e).clone());
            bad = true;
        }
        if bad {
            continue;
        }
        let (id, label, attribute, task, split) = (id.unwrap(), label.unwrap(), attribute.unwrap(), task.unwrap(), split.unwrap());
        if !seen_ids.insert(id) {
            err(format!("duplicate id {id}"));
            continue;
        }
        match class_task.get(&label) {
            Some((t, first)) if *t != task => {
                err(format!("class {label} assigned to task {task} but row {first} assigned it to task {t}"));
                continue;
            }
            None => {
                class_task.insert(label, (task, rowno));
            }
            _ => {}
        }
        let path = root_dir.join(field(1));
        if !path.is_file() {
            err(format!("missing image file {}", path.display()));
            continue;
        }
        let image = match load_image(&path, input_shape) {
            Ok(img) => img,
            Err(e) => {
                err(e);
                continue;
            }
        };
        max_attr = max_attr.max(attribute);
        let entry = tasks
            .entry(task)
            .or_insert_with(|| TaskData { task_id: task, classes: vec![], train: vec![], val: vec![], test: vec![] });
        if !entry.classes.contains(&label) {
            entry.classes.push(label);
        }
        let rec = SampleRecord { id, image, label, attribute, task_id: task };
        match split {
            Split::Train => entry.train.push(rec),
            Split::Val => entry.val.push(rec),
            Split::Test => entry.test.push(rec),
        }
    }
    if !errors.is_empty() {
        return Err(IngestError::Validation(errors));
    }
    let mut stream = TaskStream { input_shape, num_groups: (max_attr + 1).max(2), tasks: tasks.into_values().collect() };
    for t in &mut stream.tasks {
        t.classes.sort_unstable();
        let labels: Vec<usize> = t.train.iter().map(|r| r.label).collect();
        let attrs: Vec<usize> = t.train.iter().map(|r| r.attribute).collect();
        log::info!("task {}: {} samples, Cramér's V(label, attribute) = {:.4}", t.task_id, t.len(), cramers_v(&labels, &attrs));
    }
    Ok(stream)
}

/// Persists a stream as `images/<id>.bin` tensors plus `metadata.csv`.
pub fn write_stream(stream: &TaskStream, dir: &Path) -> std::io::Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let meta = dir.join("metadata.csv");
    let mut w = csv::Writer::from_path(&meta)?;
    w.write_record(METADATA_HEADER)?;
    for (_, split, r) in stream.records() {
        let rel = format!("images/{}.bin", r.id);
        write_tensor(&dir.join(&rel), stream.input_shape, &r.image)?;
        w.write_record([
            r.id.to_string(),
            rel,
            r.label.to_string(),
            r.attribute.to_string(),
            r.task_id.to_string(),
            split.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn fixture(rows: &[&str]) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("img")).unwrap();
        for i in 0..8 {
            let data: Vec<f32> = (0..12).map(|v| (v + i) as f32 / 20.0).collect();
            write_tensor(&dir.path().join(format!("img/{i}.bin")), (3, 2, 2), &data).unwrap();
        }
        let meta = dir.path().join("meta.csv");
        let mut f = std::fs::File::create(&meta).unwrap();
        writeln!(f, "id,path,label,attribute,task,split").unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        (dir, meta)
    }

    const GOOD: [&str; 6] = [
        "0,img/0.bin,0,0,1,train",
        "1,img/1.bin,1,1,1,train",
        "2,img/2.bin,0,1,1,test",
        "3,img/3.bin,2,0,2,train",
        "4,img/4.bin,3,1,2,val",
        "5,img/5.bin,3,0,2,test",
    ];

    #[test]
    fn well_formed_fixture() {
        let (dir, meta) = fixture(&GOOD);
        let s = ingest_csv(dir.path(), &meta, (3, 2, 2)).unwrap();
        assert_eq!(s.tasks.len(), 2);
        assert_eq!(s.tasks[0].classes, vec![0, 1]);
        assert_eq!(s.tasks[1].classes, vec![2, 3]);
        assert_eq!(s.num_groups, 2);
        assert_eq!(s.tasks[1].val.len(), 1);
    }

    #[test]
    fn split_typo_names_row() {
        let mut rows = GOOD.to_vec();
        rows[2] = "2,img/2.bin,0,1,1,trian";
        let (dir, meta) = fixture(&rows);
        match ingest_csv(dir.path(), &meta, (3, 2, 2)) {
            Err(IngestError::Validation(errs)) => {
                assert_eq!(errs.len(), 1);
                assert_eq!(errs[0].row, 3);
                assert!(errs[0].message.contains("trian"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_and_class_conflict_and_missing_file() {
        let mut rows = GOOD.to_vec();
        rows[1] = "0,img/1.bin,1,1,1,train";
        rows[3] = "3,img/3.bin,0,0,2,train";
        rows[4] = "4,img/missing.bin,3,1,2,val";
        let (dir, meta) = fixture(&rows);
        match ingest_csv(dir.path(), &meta, (3, 2, 2)) {
            Err(IngestError::Validation(errs)) => {
                let rows: Vec<usize> = errs.iter().map(|e| e.row).collect();
                assert_eq!(rows, vec![2, 4, 5]);
                assert!(errs[0].message.contains("duplicate id"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("m.csv");
        std::fs::write(&meta, "id,file,label,attribute,task,split\n").unwrap();
        assert!(matches!(ingest_csv(dir.path(), &meta, (3, 2, 2)), Err(IngestError::Header(_))));
    }

    #[test]
    fn png_images_are_resized() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(8, 8, |x, _| image::Rgb([(x * 30) as u8, 0, 255]));
        img.save(dir.path().join("a.png")).unwrap();
        img.save(dir.path().join("b.png")).unwrap();
        let meta = dir.path().join("m.csv");
        std::fs::write(&meta, "id,path,label,attribute,task,split\n0,a.png,0,0,1,train\n1,b.png,1,1,1,test\n").unwrap();
        let s = ingest_csv(dir.path(), &meta, (3, 4, 4)).unwrap();
        let r = &s.tasks[0].train[0];
        assert_eq!(r.image.len(), 48);
        assert!(r.image[32..].iter().all(|v| (*v - 1.0).abs() < 1e-6));
    }
}
