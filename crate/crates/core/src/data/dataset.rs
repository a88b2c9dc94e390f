//! On-disk datasets: PPM pairs, caption sidecars and a `key=value` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{pnm, DataOptions, Dataset, TwoFrameSample};
use crate::config::TOOL_VERSION;
use crate::error::{Error, Result};
use crate::model::vocab::Vocabulary;
use crate::task::Task;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub task: Task,
    pub n: usize,
    pub seed: u64,
    pub image_size: usize,
    pub text_len: usize,
    /// SHA-256 over every sample file, in sample then cond/target/caption order.
    pub checksum: String,
    /// Tool that wrote the dataset.
    pub version: String,
}

impl Manifest {
    pub fn render(&self) -> String {
        format!(
            "task={}\nn={}\nseed={}\nimage_size={}\ntext_len={}\nchecksum={}\nversion={}\n",
            self.task, self.n, self.seed, self.image_size, self.text_len, self.checksum, self.version
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut task = None;
        let mut n = None;
        let mut seed = None;
        let mut image_size = None;
        let mut text_len = None;
        let mut checksum = None;
        let mut version = String::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line without '=': {line:?}")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| Error::Config(format!("manifest {k}: bad number {v:?}")));
            match k {
                "task" => task = Some(v.parse::<Task>()?),
                "n" => n = Some(num(v)? as usize),
                "seed" => seed = Some(num(v)?),
                "image_size" => image_size = Some(num(v)? as usize),
                "text_len" => text_len = Some(num(v)? as usize),
                "checksum" => checksum = Some(v.to_string()),
                "version" => version = v.to_string(),
                _ => return Err(Error::Config(format!("unknown manifest key {k:?}"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("manifest lacks {k}"));
        Ok(Self {
            task: task.ok_or_else(|| missing("task"))?,
            n: n.ok_or_else(|| missing("n"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            image_size: image_size.ok_or_else(|| missing("image_size"))?,
            text_len: text_len.ok_or_else(|| missing("text_len"))?,
            checksum: checksum.ok_or_else(|| missing("checksum"))?,
            version,
        })
    }
}

fn sample_paths(dir: &Path, i: usize) -> [PathBuf; 3] {
    let stem = format!("sample_{i:06}");
    [
        dir.join(format!("{stem}.cond.ppm")),
        dir.join(format!("{stem}.target.ppm")),
        dir.join(format!("{stem}.txt")),
    ]
}

fn sample_files(s: &TwoFrameSample) -> Result<[Vec<u8>; 3]> {
    Ok([
        pnm::encode_ppm(&s.cond)?,
        pnm::encode_ppm(&s.target)?,
        format!("{}\n", s.caption).into_bytes(),
    ])
}

/// Writes every sample and then the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut hasher = Sha256::new();
    for (i, s) in ds.samples.iter().enumerate() {
        for (path, bytes) in sample_paths(dir, i).iter().zip(sample_files(s)?) {
            hasher.update(&bytes);
            fs::write(path, bytes)?;
        }
    }
    let manifest = Manifest {
        task: ds.task,
        n: ds.samples.len(),
        seed: ds.seed,
        image_size: ds.options.image_size,
        text_len: ds.options.text_len,
        checksum: format!("{:x}", hasher.finalize()),
        version: TOOL_VERSION.to_string(),
    };
    fs::write(dir.join(MANIFEST), manifest.render())?;
    Ok(manifest)
}

/// Reads a dataset back, verifying the checksum.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let vocab = Vocabulary::shipped();
    let mut hasher = Sha256::new();
    let mut samples = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        let [cp, tp, xp] = sample_paths(dir, i);
        let (cb, tb, xb) = (fs::read(cp)?, fs::read(tp)?, fs::read(xp)?);
        hasher.update(&cb);
        hasher.update(&tb);
        hasher.update(&xb);
        let caption = String::from_utf8(xb)
            .map_err(|_| Error::Config(format!("sample {i}: caption is not UTF-8")))?
            .trim()
            .to_string();
        let ids = vocab.encode(&caption, manifest.text_len)?;
        samples.push(TwoFrameSample {
            cond: pnm::decode_pnm(&cb)?,
            target: pnm::decode_pnm(&tb)?,
            caption,
            ids,
            task: manifest.task,
        });
    }
    let got = format!("{:x}", hasher.finalize());
    if got != manifest.checksum {
        return Err(Error::Config(format!(
            "dataset checksum mismatch in {}: manifest {}, files {got}",
            dir.display(),
            manifest.checksum
        )));
    }
    Ok(Dataset {
        task: manifest.task,
        seed: manifest.seed,
        options: DataOptions { image_size: manifest.image_size, text_len: manifest.text_len },
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;

    #[test]
    fn empty_dataset_writes_only_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &make_dataset(Task::Canny, 0, 1).unwrap()).unwrap();
        assert_eq!(m.n, 0);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from(MANIFEST)]);
        assert_eq!(load_dataset(dir.path()).unwrap().samples.len(), 0);
    }

    #[test]
    fn same_seed_gives_same_checksum_and_files_round_trip() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = make_dataset(Task::Canny, 4, 11).unwrap();
        let ma = write_dataset(a.path(), &ds).unwrap();
        let mb = write_dataset(b.path(), &make_dataset(Task::Canny, 4, 11).unwrap()).unwrap();
        assert_eq!(ma, mb);
        assert!(a.path().join("sample_000003.target.ppm").exists());
        // canny and subject images are byte-valued, so the load is exact
        assert_eq!(load_dataset(a.path()).unwrap(), ds);
        let other = write_dataset(b.path(), &make_dataset(Task::Canny, 4, 12).unwrap()).unwrap();
        assert_ne!(other.checksum, ma.checksum);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &make_dataset(Task::Subject, 2, 1).unwrap()).unwrap();
        fs::write(dir.path().join("sample_000001.txt"), "circle\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn manifest_rejects_unknown_task_and_keys() {
        let ok = "task=depth\nn=0\nseed=1\nimage_size=32\ntext_len=6\nchecksum=x\n";
        assert_eq!(Manifest::parse(ok).unwrap().task, Task::Depth);
        assert!(Manifest::parse(&ok.replace("depth", "sketch")).is_err());
        assert!(Manifest::parse(&format!("{ok}extra=1\n")).is_err());
    }
}
