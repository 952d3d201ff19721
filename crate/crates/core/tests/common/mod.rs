pub mod op_grads;
