//! Register-based bytecode VM: executable format, compiler from placed
//! modules, serializer and interpreter.

pub mod compile;
pub mod exe;
pub mod interp;
pub mod serial;
#[cfg(test)]
pub(crate) mod testutil;

pub use compile::{compile_to_executable, PrimOverrides};
pub use exe::{
    disasm, disasm_instr, AdtMeta, Executable, Instr, PrimDecl, VMFunction, FORMAT_VERSION, MAGIC,
    OPCODE_COUNT, OPCODE_NAMES, TUPLE_TAG,
};
pub use interp::{
    attrs_encode, composite_encode, unit, Memory, PrimFn, Registry, TensorBack, VMObject, Vm,
    VmStats, VmTensor,
};
pub use serial::{deserialize, serialize, validate};
