// The guide's code blocks run as doc-tests so the book can never drift from
// the library. Each chapter becomes one module here; `cargo test --doc -p
// gbml` executes every `rust` fence in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/tensors_and_autodiff.md")]
mod tensors_and_autodiff {}

#[doc = include_str!("../../../book/src/few_shot_tasks.md")]
mod few_shot_tasks {}

#[doc = include_str!("../../../book/src/inner_and_outer_loops.md")]
mod inner_and_outer_loops {}

#[doc = include_str!("../../../book/src/trajectory_regularization.md")]
mod trajectory_regularization {}

#[doc = include_str!("../../../book/src/diagnostics.md")]
mod diagnostics {}

#[doc = include_str!("../../../book/src/cli_and_experiments.md")]
mod cli_and_experiments {}
