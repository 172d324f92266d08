//! Dataset discovery: `<root>/<class>/*.pgm|*.ppm` or `<root>/manifest.tsv`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{contract_err, Error, Result};
use crate::lbp::Image;
use crate::train::Dataset;

use super::netpbm::read_pnm;

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Index is the label.
    pub class_names: Vec<String>,
    /// Paths relative to `root`, sorted.
    pub samples: Vec<(PathBuf, usize)>,
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm"))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Lists samples under `root`. A `manifest.tsv` (`path<TAB>label` per
/// line) takes precedence over class subdirectories. Labels that are all
/// integers are used as indices directly; otherwise they are class names,
/// sorted lexicographically.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest = root.join(MANIFEST);
    let (class_names, mut samples) = if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (path, label) = line.split_once('\t').ok_or_else(|| Error::Format(format!(
                "{}:{}: expected path<TAB>label",
                manifest.display(),
                n + 1
            )))?;
            rows.push((PathBuf::from(path.trim()), label.trim().to_string()));
        }
        let numeric: Option<Vec<usize>> = rows.iter().map(|(_, l)| l.parse().ok()).collect();
        match numeric {
            Some(ids) => {
                let m = ids.iter().max().map_or(0, |&m| m + 1);
                let names = (0..m).map(|i| i.to_string()).collect();
                (names, rows.into_iter().map(|(p, _)| p).zip(ids).collect::<Vec<_>>())
            }
            None => {
                let names: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
                let samples = rows
                    .into_iter()
                    .map(|(p, l)| {
                        let idx = names.binary_search(&l).expect("collected above");
                        (p, idx)
                    })
                    .collect();
                (names, samples)
            }
        }
    } else {
        let mut names = Vec::new();
        let mut samples = Vec::new();
        for dir in read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let label = names.len();
            let mut any = false;
            for file in read_dir_sorted(&dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                samples.push((PathBuf::from(&name).join(file.file_name().unwrap()), label));
                any = true;
            }
            if any {
                names.push(name);
            }
        }
        (names, samples)
    };
    if samples.is_empty() {
        return Err(contract_err!("no images found under {}", root.display()));
    }
    samples.sort();
    for (p, _) in &samples {
        if !root.join(p).is_file() {
            return Err(Error::Image {
                path: root.join(p),
                reason: "listed image does not exist".into(),
            });
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        class_names,
        samples,
    })
}

impl DatasetManifest {
    /// Re-indexes labels against `names` (e.g. the classes a model was
    /// trained on); every class here must appear there.
    pub fn with_class_names(mut self, names: &[String]) -> Result<Self> {
        let map: Vec<usize> = self
            .class_names
            .iter()
            .map(|c| {
                names
                    .iter()
                    .position(|n| n == c)
                    .ok_or_else(|| contract_err!("class {c:?} is not one of {names:?}"))
            })
            .collect::<Result<_>>()?;
        for s in &mut self.samples {
            s.1 = map[s.1];
        }
        self.class_names = names.to_vec();
        Ok(self)
    }

    pub fn read_images(&self) -> Result<Vec<(Image, usize)>> {
        self.samples
            .iter()
            .map(|(p, l)| Ok((read_pnm(&self.root.join(p))?, *l)))
            .collect()
    }

    /// Decodes, resizes and LBP-encodes every image.
    pub fn load(&self, image_size: usize, threads: usize) -> Result<Dataset<f32>> {
        Dataset::from_images(&self.read_images()?, image_size, self.class_names.clone(), threads)
    }
}

/// Worker threads for preprocessing, from `VTFF_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("VTFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

pub fn load_dataset(root: &Path, image_size: usize) -> Result<Dataset<f32>> {
    load_manifest(root)?.load(image_size, worker_threads())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::netpbm::write_pnm;

    fn put(root: &Path, rel: &str, v: u8) {
        let path = root.join(rel);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_pnm(&path, &Image::new(2, 2, 1, vec![v; 4]).unwrap()).unwrap();
    }

    #[test]
    fn class_directories() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["happy/b.pgm", "happy/a.pgm", "angry/z.pgm", "angry/y.pgm", "happy/c.pgm"] {
            put(dir.path(), f, 9);
        }
        std::fs::write(dir.path().join("happy/notes.txt"), "x").unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.class_names, vec!["angry", "happy"]);
        assert_eq!(m.samples.len(), 5);
        assert_eq!(m.samples[0], (PathBuf::from("angry/y.pgm"), 0));
        assert_eq!(m, load_manifest(dir.path()).unwrap());
        let ds = m.load(4, 2).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.samples[0].rgb.shape(), &[4, 4, 3]);
    }

    #[test]
    fn manifest_with_names_and_numbers() {
        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), "img/1.pgm", 1);
        put(dir.path(), "img/2.pgm", 2);
        std::fs::write(dir.path().join(MANIFEST), "img/2.pgm\tsad\nimg/1.pgm\tfear\n").unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.class_names, vec!["fear", "sad"]);
        assert_eq!(m.samples, vec![(PathBuf::from("img/1.pgm"), 0), (PathBuf::from("img/2.pgm"), 1)]);
        std::fs::write(dir.path().join(MANIFEST), "img/2.pgm\t3\nimg/1.pgm\t0\n").unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.class_names.len(), 4);
        assert_eq!(m.samples[1].1, 3);
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(dir.path()).is_err());
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/bad.pgm"), "P5\n9 9\n255\n").unwrap();
        let err = load_manifest(dir.path()).unwrap().load(4, 1).unwrap_err();
        assert!(err.to_string().contains("bad.pgm"), "{err}");
    }

    #[test]
    fn reindexing_against_trained_classes() {
        let dir = tempfile::tempdir().unwrap();
        put(dir.path(), "sad/1.pgm", 1);
        let names = vec!["happy".to_string(), "sad".to_string()];
        let m = load_manifest(dir.path()).unwrap().with_class_names(&names).unwrap();
        assert_eq!(m.samples[0].1, 1);
        assert!(load_manifest(dir.path()).unwrap().with_class_names(&names[..1]).is_err());
    }
}
