//! Matrix Market, CSV and JSON files of a pipeline directory. Every number
//! is written with 17 significant digits and every file starts with a
//! provenance line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::io::load_coo_from_matrix_market_str;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::CliError;

/// Tool version and hash of the resolved numeric configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new<T: Serialize>(command: &str, config: &T) -> Self {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(serde_json::to_vec(config).expect("config serializes"));
        let digest = h.finalize();
        let hex = digest.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        Self {
            tool: format!("hinfctl {}", env!("CARGO_PKG_VERSION")),
            config_hash: hex,
        }
    }

    fn line(&self) -> String {
        format!("{} config {}", self.tool, self.config_hash)
    }
}

pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Coordinate format when at most half of the entries are nonzero, array
/// format otherwise.
pub fn write_mtx(path: &Path, m: &DMatrix<f64>, prov: &Provenance) -> Result<(), CliError> {
    let nnz = m.iter().filter(|&&x| x != 0.0).count();
    let mut s = String::new();
    if 2 * nnz <= m.len() && !m.is_empty() {
        s.push_str("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "% {}", prov.line());
        let _ = writeln!(s, "{} {} {}", m.nrows(), m.ncols(), nnz);
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    let _ = writeln!(s, "{} {} {}", i + 1, j + 1, num(m[(i, j)]));
                }
            }
        }
    } else {
        s.push_str("%%MatrixMarket matrix array real general\n");
        let _ = writeln!(s, "% {}", prov.line());
        let _ = writeln!(s, "{} {}", m.nrows(), m.ncols());
        for x in m.iter() {
            let _ = writeln!(s, "{}", num(*x));
        }
    }
    write_file(path, &s)
}

pub fn write_vector(path: &Path, v: &DVector<f64>, prov: &Provenance) -> Result<(), CliError> {
    write_mtx(
        path,
        &DMatrix::from_column_slice(v.len(), 1, v.as_slice()),
        prov,
    )
}

/// Reads coordinate or array files, general or symmetric.
pub fn read_mtx(path: &Path) -> Result<DMatrix<f64>, CliError> {
    let text = read_file(path)?;
    // the parser rejects empty arrays, which occur for zero-rank factors
    if let Some(shape) = empty_shape(&text) {
        return Ok(DMatrix::zeros(shape.0, shape.1));
    }
    let coo = load_coo_from_matrix_market_str::<f64>(&text)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(DMatrix::from(&coo))
}

fn empty_shape(text: &str) -> Option<(usize, usize)> {
    let line = text
        .lines()
        .find(|l| !l.starts_with('%') && !l.trim().is_empty())?;
    let dims: Vec<usize> = line
        .split_whitespace()
        .map(|t| t.parse().ok())
        .collect::<Option<_>>()?;
    match dims[..] {
        [r, c] | [r, c, _] if r == 0 || c == 0 => Some((r, c)),
        _ => None,
    }
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>, CliError> {
    let m = read_mtx(path)?;
    if m.ncols() != 1 {
        return Err(CliError::Input(format!(
            "{}: expected one column",
            path.display()
        )));
    }
    Ok(m.column(0).clone_owned())
}

/// `serde_json` pretty printer that writes floats with 17 significant digits.
struct Digits<'a>(PrettyFormatter<'a>);

impl Formatter for Digits<'_> {
    fn write_f64<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        value: f64,
    ) -> std::io::Result<()> {
        w.write_all(num(value).as_bytes())
    }
    fn begin_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

#[derive(Serialize)]
struct WithProvenance<'a, T> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

/// JSON object `body` with a leading `provenance` field. Non-finite floats
/// become `null`.
pub fn write_json<T: Serialize>(path: &Path, body: &T, prov: &Provenance) -> Result<(), CliError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Digits(PrettyFormatter::new()));
    WithProvenance {
        provenance: prov,
        body,
    }
    .serialize(&mut ser)
    .map_err(|e| CliError::Internal(e.to_string()))?;
    out.push(b'\n');
    write_file(path, &String::from_utf8(out).expect("json is utf-8"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    serde_json::from_str(&read_file(path)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// CSV with a `#` provenance line, a header and one row per record.
pub fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
    prov: &Provenance,
) -> Result<(), CliError> {
    let mut s = format!("# {}\n{}\n", prov.line(), header.join(","));
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    write_file(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance::new("test", &1)
    }

    #[test]
    fn mtx_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dense = DMatrix::from_fn(3, 2, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0));
        let mut sparse = DMatrix::zeros(4, 4);
        sparse[(1, 2)] = std::f64::consts::PI;
        sparse[(3, 0)] = -1e-300;
        for (name, m) in [("d.mtx", &dense), ("s.mtx", &sparse)] {
            let p = dir.path().join(name);
            write_mtx(&p, m, &prov()).unwrap();
            assert_eq!(&read_mtx(&p).unwrap(), m);
        }
        let text = fs::read_to_string(dir.path().join("s.mtx")).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real general"));
    }

    #[test]
    fn empty_matrix_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.mtx");
        write_mtx(&p, &DMatrix::zeros(5, 0), &prov()).unwrap();
        assert_eq!(read_mtx(&p).unwrap().shape(), (5, 0));
    }

    #[test]
    fn json_floats_carry_seventeen_digits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json(&p, &serde_json::json!({ "x": 0.1 }), &prov()).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
        let v: serde_json::Value = read_json(&p).unwrap();
        assert_eq!(v["x"].as_f64(), Some(0.1));
        assert!(v["provenance"]["config_hash"].is_string());
    }

    #[test]
    fn provenance_depends_on_config() {
        assert_eq!(Provenance::new("a", &1), Provenance::new("a", &1));
        assert_ne!(Provenance::new("a", &1), Provenance::new("a", &2));
    }
}
