//! Plain-text artifact formats (meshes, measurements, fields, datasets) and
//! the binary checkpoint layout.
//!
//! All formats are line-oriented and whitespace-separated. Floating values
//! are written with 17 significant digits so rereading reproduces them
//! bit-exactly. Writers append a trailing `HASH <hex>` line carrying the
//! run-config hash; readers accept files with or without it.

use crate::error::{GraphDpsError, Result};
use crate::fem::{MeasurementSet, NoiseKind};
use crate::mesh::TriMesh;
use crate::score::{ScoreNetConfig, ScoreNetParams};
use crate::NodeField;
use ndarray::Array2;
use std::fmt::Write as _;
use std::io::{Read as _, Write as _};
use std::path::Path;

fn format_err(path: &Path, message: impl Into<String>) -> GraphDpsError {
    GraphDpsError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Tokenized line reader that skips blank lines.
struct Lines<'a> {
    path: &'a Path,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Self {
            path,
            lines: text.lines().enumerate(),
        }
    }

    fn next_tokens(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (idx, line) in self.lines.by_ref() {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok((idx + 1, tokens));
            }
        }
        Err(format_err(self.path, "unexpected end of file"))
    }

}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, token: &str, what: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| format_err(path, format!("line {line}: cannot parse {what} from {token:?}")))
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(content.as_bytes())?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Write a mesh: `MESH <nv> <nt>`, vertex lines, triangle lines,
/// `BOUNDARY <nb>` plus indices, trailing hash.
pub fn save_mesh(path: &Path, mesh: &TriMesh, config_hash: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "MESH {} {}", mesh.num_vertices(), mesh.num_triangles()).unwrap();
    for v in &mesh.vertices {
        writeln!(out, "{:.16e} {:.16e}", v[0], v[1]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "{} {} {}", t[0], t[1], t[2]).unwrap();
    }
    writeln!(out, "BOUNDARY {}", mesh.boundary_loop.len()).unwrap();
    for b in &mesh.boundary_loop {
        writeln!(out, "{b}").unwrap();
    }
    writeln!(out, "HASH {config_hash}").unwrap();
    write_atomic(path, &out)
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    let (ln, header) = lines.next_tokens()?;
    if header.len() != 3 || header[0] != "MESH" {
        return Err(format_err(path, format!("line {ln}: expected MESH <nv> <nt>")));
    }
    let nv: usize = parse(path, ln, header[1], "vertex count")?;
    let nt: usize = parse(path, ln, header[2], "triangle count")?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, t) = lines.next_tokens()?;
        if t.len() != 2 {
            return Err(format_err(path, format!("line {ln}: expected x y")));
        }
        vertices.push([
            parse(path, ln, t[0], "x coordinate")?,
            parse(path, ln, t[1], "y coordinate")?,
        ]);
    }
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, t) = lines.next_tokens()?;
        if t.len() != 3 {
            return Err(format_err(path, format!("line {ln}: expected i j k")));
        }
        triangles.push([
            parse(path, ln, t[0], "index")?,
            parse(path, ln, t[1], "index")?,
            parse(path, ln, t[2], "index")?,
        ]);
    }
    let (ln, b) = lines.next_tokens()?;
    if b.len() != 2 || b[0] != "BOUNDARY" {
        return Err(format_err(path, format!("line {ln}: expected BOUNDARY <nb>")));
    }
    let nb: usize = parse(path, ln, b[1], "boundary count")?;
    let mut boundary_loop = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (ln, t) = lines.next_tokens()?;
        boundary_loop.push(parse(path, ln, t[0], "boundary index")?);
    }
    let mesh = TriMesh {
        vertices,
        triangles,
        boundary_loop,
    };
    mesh.validate(false)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(mesh)
}

/// Write measurements: `MEAS <m> <sigma_y> <noise_kind>` plus voltage lines.
pub fn save_measurements(path: &Path, m: &MeasurementSet, config_hash: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "MEAS {} {:.16e} {}",
        m.y.len(),
        m.sigma_y,
        m.noise_kind.as_str()
    )
    .unwrap();
    for v in &m.y {
        writeln!(out, "{v:.16e}").unwrap();
    }
    writeln!(out, "HASH {config_hash}").unwrap();
    write_atomic(path, &out)
}

pub fn load_measurements(path: &Path) -> Result<MeasurementSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    let (ln, header) = lines.next_tokens()?;
    if header.len() != 4 || header[0] != "MEAS" {
        return Err(format_err(
            path,
            format!("line {ln}: expected MEAS <m> <sigma_y> <noise_kind>"),
        ));
    }
    let m: usize = parse(path, ln, header[1], "measurement count")?;
    let sigma_y: f64 = parse(path, ln, header[2], "sigma_y")?;
    let noise_kind = NoiseKind::parse(header[3])
        .ok_or_else(|| format_err(path, format!("line {ln}: unknown noise kind {:?}", header[3])))?;
    let mut y = Vec::with_capacity(m);
    for _ in 0..m {
        let (ln, t) = lines.next_tokens()?;
        y.push(parse(path, ln, t[0], "voltage")?);
    }
    Ok(MeasurementSet {
        y,
        sigma_y,
        noise_kind,
    })
}

/// Write a node field: `FIELD <n>` plus one value per line.
pub fn save_field(path: &Path, field: &NodeField, config_hash: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "FIELD {}", field.len()).unwrap();
    for v in &field.values {
        writeln!(out, "{v:.16e}").unwrap();
    }
    writeln!(out, "HASH {config_hash}").unwrap();
    write_atomic(path, &out)
}

pub fn load_field(path: &Path) -> Result<NodeField> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = Lines::new(path, &text);
    let (ln, header) = lines.next_tokens()?;
    if header.len() != 2 || header[0] != "FIELD" {
        return Err(format_err(path, format!("line {ln}: expected FIELD <n>")));
    }
    let n: usize = parse(path, ln, header[1], "field length")?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, t) = lines.next_tokens()?;
        values.push(parse(path, ln, t[0], "value")?);
    }
    Ok(NodeField::new(values))
}

/// Checkpoint directory layout: `params.index` (name rows cols per line),
/// one little-endian f64 binary per parameter (row-major), and a `config`
/// key=value file.
pub fn save_checkpoint(dir: &Path, params: &ScoreNetParams, config_text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (name, value) in params.iter() {
        let (rows, cols) = value.dim();
        writeln!(index, "{name} {rows} {cols}").unwrap();
        let mut bytes = Vec::with_capacity(rows * cols * 8);
        for v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(dir.join(format!("{name}.bin")))?;
        f.write_all(&bytes)?;
    }
    write_atomic(&dir.join("params.index"), &index)?;
    write_atomic(&dir.join("config"), config_text)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ScoreNetParams, String)> {
    let index_path = dir.join("params.index");
    let text = std::fs::read_to_string(&index_path)?;
    let mut params = ScoreNetParams::new();
    for (idx, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 3 {
            return Err(format_err(
                &index_path,
                format!("line {}: expected name rows cols", idx + 1),
            ));
        }
        let name = tokens[0];
        let rows: usize = parse(&index_path, idx + 1, tokens[1], "rows")?;
        let cols: usize = parse(&index_path, idx + 1, tokens[2], "cols")?;
        let bin_path = dir.join(format!("{name}.bin"));
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != rows * cols * 8 {
            return Err(format_err(
                &bin_path,
                format!("expected {} bytes, found {}", rows * cols * 8, bytes.len()),
            ));
        }
        let mut value = Array2::zeros((rows, cols));
        for (k, chunk) in bytes.chunks_exact(8).enumerate() {
            value[(k / cols, k % cols)] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        params.insert(name, value);
    }
    let config_text = std::fs::read_to_string(dir.join("config"))?;
    Ok((params, config_text))
}

/// Parse the network hyperparameters back out of a checkpoint `config` body.
pub fn net_config_from_text(text: &str) -> Result<ScoreNetConfig> {
    let mut config = ScoreNetConfig::default();
    for line in text.lines() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "net.hidden_dim" => config.hidden_dim = value.parse().unwrap_or(config.hidden_dim),
            "net.depth" => config.depth = value.parse().unwrap_or(config.depth),
            "net.time_embed_dim" => {
                config.time_embed_dim = value.parse().unwrap_or(config.time_embed_dim)
            }
            "net.knn_k" => config.knn_k = value.parse().unwrap_or(config.knn_k),
            _ => {}
        }
    }
    Ok(config)
}

/// Write a CSV file with a `# config_hash=` comment line, a header, and rows.
pub fn save_csv(path: &Path, header: &str, rows: &[String], config_hash: &str) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").unwrap();
    writeln!(out, "{header}").unwrap();
    for row in rows {
        writeln!(out, "{row}").unwrap();
    }
    write_atomic(path, &out)
}

/// Dataset manifest plus per-sample field/measurement files.
pub struct DatasetOnDisk {
    pub dir: std::path::PathBuf,
    pub count: usize,
}

impl DatasetOnDisk {
    pub fn field_path(&self, idx: usize) -> std::path::PathBuf {
        self.dir.join(format!("sample_{idx}.field"))
    }

    pub fn meas_path(&self, idx: usize) -> std::path::PathBuf {
        self.dir.join(format!("sample_{idx}.meas"))
    }

    pub fn load_fields(&self) -> Result<Vec<NodeField>> {
        (0..self.count).map(|i| load_field(&self.field_path(i))).collect()
    }
}

/// Read `manifest` in a dataset directory; returns the handle and the raw
/// manifest keys.
pub fn open_dataset(dir: &Path) -> Result<(DatasetOnDisk, Vec<(String, String)>)> {
    let manifest_path = dir.join("manifest");
    let text = std::fs::read_to_string(&manifest_path)?;
    let mut pairs = Vec::new();
    let mut count = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "dataset.count" {
                count = v.parse().ok();
            }
            pairs.push((k, v));
        }
    }
    let count = count.ok_or_else(|| format_err(&manifest_path, "missing dataset.count"))?;
    Ok((
        DatasetOnDisk {
            dir: dir.to_path_buf(),
            count,
        },
        pairs,
    ))
}

pub fn save_manifest(dir: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        writeln!(out, "{k}={v}").unwrap();
    }
    write_atomic(&dir.join("manifest"), &out)
}
