//! Drug-combination synergy prediction over a heterogeneous drug / protein /
//! disease graph whose drug–target and drug–drug edges are refined by
//! learned edge predictors.
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod entity;
pub mod featurize;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod tsv;
