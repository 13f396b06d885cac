//! Manifest file: `path,label,split` CSV followed by `# key=value` metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{ClassLabel, DatasetManifest, ImageRecord, Layout, Split};
use crate::error::{Error, Result};

const HEADER: [&str; 3] = ["path", "label", "split"];

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(&mut buf);
        writer.write_record(HEADER).map_err(csv_to_io(path))?;
        for r in &manifest.records {
            writer
                .write_record([
                    r.path.to_string_lossy().as_ref(),
                    r.label.as_str(),
                    r.split.as_str(),
                ])
                .map_err(csv_to_io(path))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
    }
    let ratio = manifest
        .split_ratio
        .map_or_else(|| "none".to_string(), |r| r.to_string());
    writeln!(buf, "# root={}", manifest.root.display()).ok();
    writeln!(buf, "# layout={}", manifest.layout.as_str()).ok();
    writeln!(buf, "# seed={}", manifest.seed).ok();
    writeln!(buf, "# ratio={ratio}").ok();
    writeln!(buf, "# class_order={}", manifest.class_names.join(",")).ok();
    writeln!(buf, "# skipped={}", manifest.skipped.len()).ok();
    for p in &manifest.skipped {
        writeln!(buf, "# skipped_path={}", p.display()).ok();
    }
    for c in &manifest.empty_classes {
        writeln!(buf, "# empty_class={c}").ok();
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn csv_to_io(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };
    let schema_err = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line: line as u64,
        message,
    };

    let mut manifest = DatasetManifest::empty(PathBuf::new(), Layout::Flat);
    let mut skipped_count = None;
    let mut data = String::new();
    let mut data_lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(meta) = line.strip_prefix('#') {
            let meta = meta.trim();
            let (key, value) = meta
                .split_once('=')
                .ok_or_else(|| parse_err(lineno, format!("metadata line without `=`: `{meta}`")))?;
            match key.trim() {
                "root" => manifest.root = PathBuf::from(value),
                "layout" => {
                    manifest.layout = value.parse().map_err(|e: String| schema_err(lineno, e))?
                }
                "seed" => {
                    manifest.seed = value
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("invalid seed `{value}`")))?
                }
                "ratio" => {
                    manifest.split_ratio = match value {
                        "none" => None,
                        v => Some(
                            v.parse()
                                .map_err(|_| parse_err(lineno, format!("invalid ratio `{v}`")))?,
                        ),
                    }
                }
                "class_order" => {
                    let order: Vec<String> = value.split(',').map(str::to_owned).collect();
                    if order != DatasetManifest::canonical_class_names() {
                        return Err(schema_err(
                            lineno,
                            format!("class order `{value}` differs from glioma,meningioma,pituitary,notumor"),
                        ));
                    }
                    manifest.class_names = order;
                }
                "skipped" => {
                    skipped_count = Some(value.parse::<usize>().map_err(|_| {
                        parse_err(lineno, format!("invalid skipped count `{value}`"))
                    })?)
                }
                "skipped_path" => manifest.skipped.push(PathBuf::from(value)),
                "empty_class" => manifest
                    .empty_classes
                    .push(value.parse().map_err(|e: String| schema_err(lineno, e))?),
                // unknown metadata is carried by newer writers; ignore
                _ => {}
            }
        } else if !line.trim().is_empty() {
            data.push_str(line);
            data.push('\n');
            data_lines.push(lineno);
        }
    }
    if let Some(n) = skipped_count {
        if n != manifest.skipped.len() {
            return Err(parse_err(
                text.lines().count(),
                format!("skipped={n} but {} skipped_path entries", manifest.skipped.len()),
            ));
        }
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(data.as_bytes());
    let mut rows = reader.records();
    let header_line = data_lines.first().copied().unwrap_or(1);
    match rows.next() {
        Some(Ok(h)) if h.iter().eq(HEADER) => {}
        Some(Ok(h)) => {
            return Err(parse_err(
                header_line,
                format!("expected header `path,label,split`, found `{}`", h.iter().collect::<Vec<_>>().join(",")),
            ))
        }
        Some(Err(e)) => return Err(parse_err(header_line, e.to_string())),
        None => return Err(parse_err(header_line, "missing header `path,label,split`".into())),
    }
    for (k, row) in rows.enumerate() {
        let lineno = data_lines.get(k + 1).copied().unwrap_or(0);
        let row = row.map_err(|e| parse_err(lineno, e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(lineno, format!("expected 3 fields, found {}", row.len())));
        }
        let label: ClassLabel = row[1]
            .parse()
            .map_err(|e: String| schema_err(lineno, e))?;
        let split: Split = row[2].parse().map_err(|e: String| schema_err(lineno, e))?;
        manifest.records.push(ImageRecord {
            path: PathBuf::from(&row[0]),
            label,
            split,
            dims: None,
        });
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let mut m = DatasetManifest::empty("/data/mri", Layout::Flat);
        m.seed = 11;
        m.split_ratio = Some(0.8);
        for (i, (label, split)) in [
            (ClassLabel::Glioma, Split::Train),
            (ClassLabel::Pituitary, Split::Val),
            (ClassLabel::NoTumor, Split::Train),
        ]
        .into_iter()
        .enumerate()
        {
            m.records.push(ImageRecord {
                path: PathBuf::from(format!("{label}/img,{i}.png")),
                label,
                split,
                dims: None,
            });
        }
        m.skipped.push(PathBuf::from("glioma/bad.jpg"));
        m.empty_classes.push(ClassLabel::Meningioma);
        m
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = sample();
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("path,label,split\n"));
        assert!(text.contains("# class_order=glioma,meningioma,pituitary,notumor\n"));
    }

    #[test]
    fn misspelled_label_is_schema_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "path,label,split\na.png,glioma,train\nb.png,gloma,val\n# seed=1\n",
        )
        .unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Schema { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("gloma"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_rows_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "path,label,split\na.png,glioma\n").unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), Error::Parse { line: 2, .. }));
        fs::write(&path, "file,class,split\n").unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), Error::Parse { line: 1, .. }));
        fs::write(&path, "path,label,split\n# seed=abc\n").unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), Error::Parse { line: 2, .. }));
    }

    #[test]
    fn foreign_class_order_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "path,label,split\n# class_order=notumor,glioma,meningioma,pituitary\n").unwrap();
        assert!(matches!(load_manifest(&path).unwrap_err(), Error::Schema { .. }));
    }
}
