//! Survival statistics: discrimination metrics, Kaplan–Meier, log-rank,
//! Cox regression, cross-validation and the biomarker report.

pub mod biomarker;
pub mod concordance;
pub mod cox;
pub mod cv;
pub mod km;

pub use biomarker::{biomarker_analysis, BiomarkerReport, Covariate, CovariateGroup};
pub use concordance::{concordance_index, time_dependent_auc};
pub use cox::{fit_cox, CovariateFit, SurvivalFit};
pub use cv::{cross_validate, cross_validate_assigned, dichotomize_risk, stratified_folds, CvReport, FoldSplit, MeanSd, RiskGroup};
pub use km::{km_estimate, logrank_test, KmCurve, LogRank};
