//! JSON model files. Weights and both Cholesky factors are stored, so a
//! loaded model predicts exactly like the one that was saved.

use std::io::Write;
use std::path::Path;

use gpfield_core::kernels::{GroupAction, MatrixKernel, SeHyperparams, UsmTerm};
use gpfield_core::numerics::PsdFactorization;
use gpfield_core::pipeline::{FieldOrder, FieldStructure, LearnMetadata, LearnedField};
use gpfield_core::sparse_gp::{InducingLayout, InducingSet, SparseFieldModel, TrainingSummary};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::OrderKind;
use crate::error::{CliError, CliResult};
use crate::fsutil::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

/// Kernel structure; the numeric values live in `hyperparameters`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    SharedIsotropic { input_dim: usize, output_dim: usize },
    DiagonalIndependent { input_dim: usize, output_dim: usize },
    Usm { input_dim: usize, mixing: Vec<Vec<Vec<f64>>> },
    Gim { blocks: usize, quadrature_nodes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayoutSpec {
    Grid {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
        section: bool,
    },
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InducingFile {
    pub layout: LayoutSpec,
    pub points: Vec<Vec<f64>>,
}

/// Lower Cholesky factor, rows of the lower triangle concatenated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorFile {
    pub dim: usize,
    pub jitter: f64,
    pub lower_packed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub blocks: usize,
    pub quadrature_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureFile {
    pub order: OrderKind,
    pub quotient: Option<ActionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryFile {
    pub n_points: usize,
    pub nll: f64,
    pub used_kronecker: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub n_trajectory_points: usize,
    pub n_fixed_points: usize,
    pub nll: f64,
    pub initial_hyperparams: Vec<f64>,
    pub optimizer_evaluations: usize,
    pub optimizer_converged: bool,
    pub time_gp: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub kernel: KernelSpec,
    pub hyperparameters: Vec<f64>,
    pub noise_std: f64,
    pub structure: StructureFile,
    pub inducing: InducingFile,
    pub weights: Vec<f64>,
    pub sigma_factor: FactorFile,
    pub kzz_factor: FactorFile,
    pub summary: SummaryFile,
    pub training: TrainingRecord,
    pub metadata: Provenance,
}

fn check_len(expected: usize, found: usize) -> gpfield_core::Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(gpfield_core::Error::DimensionMismatch { expected, found })
    }
}

fn pack(f: &PsdFactorization) -> FactorFile {
    let l = f.lower();
    let n = l.nrows();
    let mut lower_packed = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            lower_packed.push(l[(i, j)]);
        }
    }
    FactorFile {
        dim: n,
        jitter: f.jitter_used(),
        lower_packed,
    }
}

fn unpack(f: &FactorFile) -> gpfield_core::Result<PsdFactorization> {
    let n = f.dim;
    check_len(n * (n + 1) / 2, f.lower_packed.len())?;
    let mut l = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in 0..=i {
            l[(i, j)] = f.lower_packed[k];
            k += 1;
        }
    }
    PsdFactorization::from_lower(l, f.jitter)
}

fn kernel_spec(k: &MatrixKernel) -> KernelSpec {
    match k {
        MatrixKernel::SharedIsotropic { base, output_dim } => KernelSpec::SharedIsotropic {
            input_dim: base.dim(),
            output_dim: *output_dim,
        },
        MatrixKernel::DiagonalIndependent(ks) => KernelSpec::DiagonalIndependent {
            input_dim: ks[0].dim(),
            output_dim: ks.len(),
        },
        MatrixKernel::Usm(terms) => KernelSpec::Usm {
            input_dim: terms[0].kernel.dim(),
            mixing: terms
                .iter()
                .map(|t| t.mixing.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        },
        MatrixKernel::Gim(g) => KernelSpec::Gim {
            blocks: g.action().blocks(),
            quadrature_nodes: g.action().quadrature_nodes(),
        },
    }
}

fn build_kernel(spec: &KernelSpec, params: &[f64]) -> gpfield_core::Result<MatrixKernel> {
    let unit = |d: usize| SeHyperparams::new(1.0, vec![1.0; d]);
    let template = match spec {
        KernelSpec::SharedIsotropic { input_dim, output_dim } => MatrixKernel::shared_isotropic(unit(*input_dim)?, *output_dim)?,
        KernelSpec::DiagonalIndependent { input_dim, output_dim } => {
            MatrixKernel::diagonal_independent(vec![unit(*input_dim)?; *output_dim])?
        }
        KernelSpec::Usm { input_dim, mixing } => {
            let terms = mixing
                .iter()
                .map(|m| {
                    let n = m.len();
                    let flat: Vec<f64> = m.iter().flatten().copied().collect();
                    check_len(n * n, flat.len())?;
                    Ok(UsmTerm {
                        kernel: unit(*input_dim)?,
                        mixing: DMatrix::from_row_slice(n, n, &flat),
                    })
                })
                .collect::<gpfield_core::Result<Vec<_>>>()?;
            MatrixKernel::usm(terms)?
        }
        KernelSpec::Gim { blocks, quadrature_nodes } => {
            let action = GroupAction::new(*blocks, *quadrature_nodes)?;
            let base = unit(action.state_dim())?;
            MatrixKernel::gim(base, action)?
        }
    };
    template.with_hyperparams(params)
}

impl ModelFile {
    pub fn from_field(field: &LearnedField, config_hash: String, seed: u64) -> Self {
        let model = field.model();
        let meta = field.metadata();
        let structure = field.structure();
        let inducing = model.inducing();
        ModelFile {
            format_version: FORMAT_VERSION,
            kernel: kernel_spec(model.kernel()),
            hyperparameters: model.kernel().hyperparams(),
            noise_std: model.noise_std(),
            structure: StructureFile {
                order: match structure.order {
                    FieldOrder::First => OrderKind::First,
                    FieldOrder::Second => OrderKind::Second,
                },
                quotient: structure.quotient.as_ref().map(|a| ActionSpec {
                    blocks: a.blocks(),
                    quadrature_nodes: a.quadrature_nodes(),
                }),
            },
            inducing: InducingFile {
                layout: match inducing.layout() {
                    InducingLayout::Grid {
                        lower,
                        upper,
                        counts,
                        section,
                    } => LayoutSpec::Grid {
                        lower: lower.clone(),
                        upper: upper.clone(),
                        counts: counts.clone(),
                        section: *section,
                    },
                    InducingLayout::Explicit => LayoutSpec::Explicit,
                },
                points: inducing.points().to_vec(),
            },
            weights: model.weights().iter().copied().collect(),
            sigma_factor: pack(model.sigma_factor()),
            kzz_factor: pack(model.kzz_factor()),
            summary: SummaryFile {
                n_points: model.summary().n_points,
                nll: model.summary().nll,
                used_kronecker: model.summary().used_kronecker,
            },
            training: TrainingRecord {
                n_trajectory_points: meta.n_trajectory_points,
                n_fixed_points: meta.n_fixed_points,
                nll: meta.nll,
                initial_hyperparams: meta.initial_hyperparams.clone(),
                optimizer_evaluations: meta.optimizer_evaluations,
                optimizer_converged: meta.optimizer_converged,
                time_gp: meta.time_gp.clone(),
            },
            metadata: Provenance {
                config_hash,
                seed,
                version: env!("CARGO_PKG_VERSION").to_owned(),
            },
        }
    }

    pub fn to_field(&self) -> gpfield_core::Result<LearnedField> {
        let kernel = build_kernel(&self.kernel, &self.hyperparameters)?;
        let inducing = match &self.inducing.layout {
            LayoutSpec::Grid {
                lower,
                upper,
                counts,
                section,
            } => {
                let set = if *section {
                    InducingSet::section_grid(lower.clone(), upper.clone(), counts.clone())?
                } else {
                    InducingSet::grid(lower.clone(), upper.clone(), counts.clone())?
                };
                if set.points() != self.inducing.points.as_slice() {
                    return Err(gpfield_core::Error::InvalidInput("inducing points do not match the grid layout".into()));
                }
                set
            }
            LayoutSpec::Explicit => InducingSet::explicit(self.inducing.points.clone())?,
        };
        let model = SparseFieldModel::from_parts(
            kernel,
            inducing,
            self.noise_std,
            DVector::from_vec(self.weights.clone()),
            unpack(&self.sigma_factor)?,
            unpack(&self.kzz_factor)?,
            TrainingSummary {
                n_points: self.summary.n_points,
                nll: self.summary.nll,
                used_kronecker: self.summary.used_kronecker,
            },
        )?;
        let structure = FieldStructure {
            order: match self.structure.order {
                OrderKind::First => FieldOrder::First,
                OrderKind::Second => FieldOrder::Second,
            },
            quotient: self
                .structure
                .quotient
                .as_ref()
                .map(|a| GroupAction::new(a.blocks, a.quadrature_nodes))
                .transpose()?,
        };
        let t = &self.training;
        let metadata = LearnMetadata {
            n_trajectory_points: t.n_trajectory_points,
            n_fixed_points: t.n_fixed_points,
            nll: t.nll,
            initial_hyperparams: t.initial_hyperparams.clone(),
            hyperparams: self.hyperparameters.clone(),
            noise_std: self.noise_std,
            optimizer_evaluations: t.optimizer_evaluations,
            optimizer_converged: t.optimizer_converged,
            time_gp: t.time_gp.clone(),
        };
        LearnedField::from_parts(model, structure, metadata)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("model serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_bytes();
        write_atomic(path, |f| f.write_all(&bytes))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let file: Self = serde_json::from_slice(&text).map_err(|e| CliError::format(path, e))?;
        if file.format_version != FORMAT_VERSION {
            return Err(CliError::format(
                path,
                format!("unsupported format version {}", file.format_version),
            ));
        }
        Ok(file)
    }
}
