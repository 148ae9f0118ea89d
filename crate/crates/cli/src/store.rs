//! Layout of a pipeline directory:
//!
//! ```text
//! manifest.json  E.mtx A.mtx J.mtx B.mtx C.mtx      gen
//! K.mtx N.mtx v_inf.mtx p_inf.mtx f.mtx            gen, toy plants only
//! margin.json  riccati/X.mtx  riccati/Y.mtx         margin
//! rom/  controller/  certificate.json               synth
//! sim/trace.csv  sim/verdict.json                   simulate
//! sweep.csv                                         sweep
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use hinfctl::controller::{CentralController, ControllerKind};
use hinfctl::flowdae::{ConstrainedSystem, NonlinearPlant, QuadraticForm};
use hinfctl::hinfbt::Certificate;
use hinfctl::margin::MarginSummary;
use hinfctl::riccati::LowRankFactor;

use crate::config::PlantKind;
use crate::error::CliError;
use crate::io::{
    read_json, read_mtx, read_vector, write_json, write_mtx, write_vector, Provenance,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: PlantKind,
    pub n_v: usize,
    pub n_p: usize,
    pub m: usize,
    pub p: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_unstable: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reynolds_like: Option<f64>,
}

pub struct Store {
    pub dir: PathBuf,
}

impl Store {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, step: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::Input(format!(
                "{} is missing; run `{step}` first",
                p.display()
            )))
        }
    }

    pub fn write_system(&self, sys: &ConstrainedSystem, prov: &Provenance) -> Result<(), CliError> {
        for (name, m) in [
            ("E", &sys.e),
            ("A", &sys.a),
            ("J", &sys.j),
            ("B", &sys.b),
            ("C", &sys.c),
        ] {
            write_mtx(&self.path(&format!("{name}.mtx")), m, prov)?;
        }
        Ok(())
    }

    /// Nonlinear terms of a toy plant. `N` is stored as the `n x n^2`
    /// matrix with `N(v, w)_i = sum_kj N[i, k n + j] v_k w_j`.
    pub fn write_nonlinear(
        &self,
        plant: &NonlinearPlant,
        prov: &Provenance,
    ) -> Result<(), CliError> {
        let n = plant.quad.n;
        let mut nmat = DMatrix::zeros(n, n * n);
        for &(k, i, j, v) in &plant.quad.entries {
            nmat[(i, k * n + j)] += v;
        }
        write_mtx(&self.path("K.mtx"), &plant.diffusion, prov)?;
        write_mtx(&self.path("N.mtx"), &nmat, prov)?;
        write_vector(&self.path("v_inf.mtx"), &plant.steady_state, prov)?;
        write_vector(&self.path("p_inf.mtx"), &plant.pressure, prov)?;
        write_vector(&self.path("f.mtx"), &plant.forcing, prov)
    }

    pub fn manifest(&self) -> Result<Manifest, CliError> {
        read_json(&self.require("manifest.json", "gen")?)
    }

    pub fn system(&self) -> Result<ConstrainedSystem, CliError> {
        self.require("manifest.json", "gen")?;
        let read = |name: &str| read_mtx(&self.path(&format!("{name}.mtx")));
        Ok(ConstrainedSystem::new(
            read("E")?,
            read("A")?,
            read("J")?,
            read("B")?,
            read("C")?,
        )?)
    }

    /// The nonlinear plant of a toy directory, or the linear plant around
    /// zero for a synthetic one.
    pub fn plant(&self) -> Result<NonlinearPlant, CliError> {
        let manifest = self.manifest()?;
        let linear = self.system()?;
        if manifest.kind == PlantKind::Synthetic {
            return Ok(NonlinearPlant::from_linear(linear));
        }
        let n = linear.n_v();
        let nmat = read_mtx(&self.path("N.mtx"))?;
        if nmat.shape() != (n, n * n) {
            return Err(CliError::Input("N.mtx must be n_v x n_v^2".into()));
        }
        let mut entries = Vec::new();
        for c in 0..n * n {
            for i in 0..n {
                let v = nmat[(i, c)];
                if v != 0.0 {
                    entries.push((c / n, i, c % n, v));
                }
            }
        }
        let reynolds_like = manifest
            .reynolds_like
            .ok_or_else(|| CliError::Input("toy manifest lacks reynolds_like".into()))?;
        Ok(NonlinearPlant {
            quad: QuadraticForm { n, entries },
            steady_state: read_vector(&self.path("v_inf.mtx"))?,
            pressure: read_vector(&self.path("p_inf.mtx"))?,
            forcing: read_vector(&self.path("f.mtx"))?,
            diffusion: read_mtx(&self.path("K.mtx"))?,
            reynolds_like,
            linear,
        })
    }

    pub fn write_factors(
        &self,
        x: &LowRankFactor,
        y: &LowRankFactor,
        prov: &Provenance,
    ) -> Result<(), CliError> {
        write_mtx(&self.path("riccati/X.mtx"), &x.z, prov)?;
        write_mtx(&self.path("riccati/Y.mtx"), &y.z, prov)
    }

    /// Margin summary and the regulator and filter factors.
    pub fn margin(&self) -> Result<(MarginSummary, LowRankFactor, LowRankFactor), CliError> {
        let summary: MarginSummary = read_json(&self.require("margin.json", "margin")?)?;
        let x = LowRankFactor::new(read_mtx(&self.path("riccati/X.mtx"))?);
        let y = LowRankFactor::new(read_mtx(&self.path("riccati/Y.mtx"))?);
        Ok((summary, x, y))
    }

    pub fn write_controller(
        &self,
        dir: &Path,
        k: &CentralController,
        cert: &Certificate,
        prov: &Provenance,
    ) -> Result<(), CliError> {
        let sys = k.system()?;
        for (name, m) in [("E", &sys.e), ("A", &sys.a), ("B", &sys.b), ("C", &sys.c)] {
            write_mtx(&dir.join(format!("{name}.mtx")), m, prov)?;
        }
        let meta = ControllerMeta {
            gamma: k.gamma,
            order: sys.order(),
            kind: k.kind,
            certificate: cert.clone(),
        };
        write_json(&dir.join("controller.json"), &meta, prov)
    }

    pub fn controller(dir: &Path) -> Result<(CentralController, ControllerMeta), CliError> {
        let meta: ControllerMeta = read_json(&dir.join("controller.json"))?;
        let read = |name: &str| read_mtx(&dir.join(format!("{name}.mtx")));
        let k = CentralController {
            e_k: read("E")?,
            a_k: read("A")?,
            b_k: read("B")?,
            c_k: read("C")?,
            j: None,
            order: meta.order,
            gamma: meta.gamma,
            kind: meta.kind,
        };
        Ok((k, meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerMeta {
    pub gamma: f64,
    pub order: usize,
    pub kind: ControllerKind,
    pub certificate: Certificate,
}
