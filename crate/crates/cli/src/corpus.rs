//! Locating and loading source animations and built window corpora.

use std::path::{Path, PathBuf};

use dymesh_core::dataset::{dmb, manifest, SyntheticSpec};
use dymesh_core::DynamicMesh;

use crate::error::{CliError, CliResult};
use crate::obj;

pub const SYNTH_SUFFIX: &str = ".synth.json";
pub const CORPUS_MANIFEST: &str = "manifest.jsonl";

/// A named source animation.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedMesh {
    pub name: String,
    pub mesh: DynamicMesh,
}

fn sorted_entries(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| {
        CliError::input(format!(
            "cannot read source directory {}: {e}",
            dir.display()
        ))
    })?;
    let mut paths = Vec::new();
    for entry in rd {
        let entry =
            entry.map_err(|e| CliError::input(format!("cannot list {}: {e}", dir.display())))?;
        let path = entry.path();
        if path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn file_name(path: &Path) -> &str {
    path.file_name().and_then(|s| s.to_str()).unwrap_or("")
}

/// Caption from a UTF-8 sidecar `<stem>.txt`, trimmed; `None` when absent.
pub fn sidecar_caption(path: &Path) -> CliResult<Option<String>> {
    let sidecar = path.with_extension("txt");
    match std::fs::read(&sidecar) {
        Ok(bytes) => {
            let text = String::from_utf8(bytes).map_err(|_| {
                CliError::input(format!("caption {} is not UTF-8", sidecar.display()))
            })?;
            Ok(Some(text.trim().to_owned()))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::input(format!(
            "cannot read caption {}: {e}",
            sidecar.display()
        ))),
    }
}

pub fn read_dmb(path: &Path) -> CliResult<DynamicMesh> {
    dmb::read(path)
        .map_err(|e| CliError::input(format!("{}: {e} (code {})", path.display(), e.code())))
}

/// Source animations in `dir`: `.dmb` files (captions from sidecars take
/// precedence over embedded ones) and `*.synth.json` generator specs, in
/// file-name order. Fails with "no input sequences" when none are found.
pub fn load_sources(dir: &Path) -> CliResult<Vec<NamedMesh>> {
    let mut out = Vec::new();
    for path in sorted_entries(dir)? {
        let name = file_name(&path);
        if let Some(stem) = name.strip_suffix(SYNTH_SUFFIX) {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
            let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| {
                CliError::input(format!("invalid generator spec {}: {e}", path.display()))
            })?;
            let meshes = spec.generate().map_err(|e| CliError::from_input(name, e))?;
            for (k, mesh) in meshes.into_iter().enumerate() {
                out.push(NamedMesh {
                    name: format!("{stem}_{k:03}"),
                    mesh,
                });
            }
        } else if let Some(stem) = name.strip_suffix(".dmb") {
            let mut mesh = read_dmb(&path)?;
            if let Some(c) = sidecar_caption(&path)? {
                mesh.set_caption(Some(c));
            }
            out.push(NamedMesh {
                name: stem.to_owned(),
                mesh,
            });
        }
    }
    if out.is_empty() {
        return Err(CliError::input("no input sequences"));
    }
    Ok(out)
}

/// Windows of a built corpus: the kept entries of `manifest.jsonl` when
/// present, otherwise every `.dmb` directly inside `dir`.
pub fn load_corpus(dir: &Path) -> CliResult<Vec<NamedMesh>> {
    let manifest_path = dir.join(CORPUS_MANIFEST);
    let paths: Vec<PathBuf> = if manifest_path.is_file() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            CliError::input(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        manifest::read_json_lines(&text)
            .map_err(|e| CliError::from_input(&manifest_path.display().to_string(), e))?
            .into_iter()
            .filter(|e| e.kept)
            .map(|e| dir.join(e.path))
            .collect()
    } else {
        sorted_entries(dir)?
            .into_iter()
            .filter(|p| file_name(p).ends_with(".dmb"))
            .collect()
    };
    let out: Vec<NamedMesh> = paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("")
                .to_owned();
            Ok(NamedMesh {
                name,
                mesh: read_dmb(p)?,
            })
        })
        .collect::<CliResult<_>>()?;
    if out.is_empty() {
        return Err(CliError::input(format!(
            "no input sequences in corpus {}",
            dir.display()
        )));
    }
    Ok(out)
}

pub fn require_frames(corpus: &[NamedMesh], frames: usize) -> CliResult<()> {
    match corpus.iter().find(|m| m.mesh.num_frames() != frames) {
        Some(bad) => Err(CliError::input(format!(
            "sequence {} has {} frames but the model expects {frames}",
            bad.name,
            bad.mesh.num_frames()
        ))),
        None => Ok(()),
    }
}

/// A static or animated mesh given on the command line: `.dmb` or `.obj`.
pub fn read_mesh(path: &Path) -> CliResult<DynamicMesh> {
    if !path.exists() {
        return Err(CliError::input(format!(
            "mesh {} does not exist",
            path.display()
        )));
    }
    match path.extension().and_then(|s| s.to_str()) {
        Some("dmb") => read_dmb(path),
        Some("obj") => obj::read(path),
        _ => Err(CliError::input(format!(
            "{}: expected a .dmb or .obj mesh",
            path.display()
        ))),
    }
}
