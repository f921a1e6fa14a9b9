mod conv;
mod elementwise;
mod layout;
mod linalg;
mod nn;
mod reduce;
mod sample;

pub use conv::{conv_out_len, Padding};

use crate::graph::{Graph, Op};
use crate::scalar::Scalar;

pub(crate) fn backward_node<T: Scalar>(graph: &Graph<T>, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    let op = &graph.nodes[idx].op;
    match op {
        Op::Leaf | Op::Detach => {}
        Op::MatMul { .. } | Op::Linear { .. } | Op::BatchMatMul { .. } => linalg::backward(graph, op, gout, grads),
        Op::Conv2d { .. } => conv::backward(graph, op, gout, grads),
        Op::BilinearSample { .. } | Op::ResizeBilinear { .. } => sample::backward(graph, op, gout, grads),
        Op::Softmax { .. } | Op::LogSoftmax { .. } | Op::LayerNorm { .. } | Op::Gelu { .. } => {
            nn::backward(graph, idx, op, gout, grads)
        }
        Op::Add { .. }
        | Op::Sub { .. }
        | Op::Mul { .. }
        | Op::Div { .. }
        | Op::Scale { .. }
        | Op::AddScalar { .. }
        | Op::Exp { .. }
        | Op::Ln { .. }
        | Op::Powf { .. }
        | Op::MseMean { .. } => elementwise::backward(graph, idx, op, gout, grads),
        Op::Sum { .. } | Op::Mean { .. } | Op::SumAxis { .. } => reduce::backward(graph, op, gout, grads),
        Op::Reshape { .. }
        | Op::Permute { .. }
        | Op::Concat { .. }
        | Op::SubsampleGrid { .. }
        | Op::RepeatLeading { .. } => layout::backward(graph, op, gout, grads),
    }
}
