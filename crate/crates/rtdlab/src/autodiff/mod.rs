//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! The design is a Wengert list: each operation appends a node holding
//! whatever its backward rule needs (input node ids plus saved values), and
//! [`Tape::backward`] walks the list once in reverse, accumulating adjoints.
//!
//! Conventions that the rest of the lab leans on:
//!
//! * Tensors are row-major `Vec<F>` plus a shape. A scalar has shape `[]`.
//! * A tensor participates in differentiation if it is a grad-requiring leaf
//!   (a parameter) or the output of a recorded op. Constants pass through
//!   ops without being recorded.
//! * Leaf gradients accumulate across any number of `backward` calls until
//!   [`Tensor::zero_grad`] is called. Alternating trainers rely on this:
//!   two backward passes in one step must not silently reset each other.
//! * [`Tape::stop_gradient`] returns a value-identical constant. Whatever is
//!   built on top of it can never route an adjoint into the argument; the
//!   cut is structural, not a runtime mask.
//! * Tapes are step-scoped: build graph, call backward, drop. Parameters
//!   outlive tapes and re-register themselves lazily on the next tape.

mod check;
pub(crate) mod kernels;
mod tape;
mod tensor;


pub use check::{grad_check, grad_check_sampled, GradCheckReport, LeafReport};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
