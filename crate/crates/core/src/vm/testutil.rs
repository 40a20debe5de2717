//! Shared helpers for VM tests: run the pass chain to a placed module, then
//! compile, serialize, reload and execute with full hygiene checks.

use std::collections::BTreeMap;

use crate::devplace::insert_device_copies;
use crate::ir::eval::PureValue;
use crate::ir::expr::{Module, Stage, TensorLiteral};
use crate::ir::parse::parse_module;
use crate::ir::types::Device;
use crate::memplan::{coalesce_storage, insert_kills, manifest_alloc};
use crate::shapefn::fuse_pass;
use crate::typesys::{infer_types, refine_and_unify_dims};
use crate::vm::compile::compile_to_executable;
use crate::vm::interp::{Registry, Vm, VmStats, VMObject};
use crate::vm::serial::{deserialize, serialize};

/// Runs every pass from source text to a placed module.
pub(crate) fn placed(src: &str, target: Device) -> Module {
    let mut m = parse_module(src).unwrap();
    if m.stage == Stage::Frontend {
        infer_types(&mut m).unwrap();
        refine_and_unify_dims(&mut m).unwrap();
        m = fuse_pass(&m);
    } else if m.stage == Stage::Typed {
        m = fuse_pass(&m);
    }
    let planned = coalesce_storage(&insert_kills(&manifest_alloc(&m, 64).unwrap()));
    insert_device_copies(&planned, target).unwrap()
}

/// Compiles, round-trips through bytes, runs `main`, and asserts that every
/// storage byte is returned by the end.
pub(crate) fn run_vm(m: &Module, args: &[TensorLiteral]) -> (PureValue, VmStats) {
    run_vm_with(m, args, &BTreeMap::new(), &Registry::new())
}

pub(crate) fn run_vm_with(
    m: &Module,
    args: &[TensorLiteral],
    overrides: &BTreeMap<String, String>,
    registry: &Registry,
) -> (PureValue, VmStats) {
    let exe = compile_to_executable(m, overrides).unwrap();
    let bytes = serialize(&exe);
    let reloaded = deserialize(&bytes).expect("own stream reloads");
    assert_eq!(reloaded, exe, "serialization must round-trip structurally");
    assert_eq!(serialize(&reloaded), bytes, "serialization must round-trip byte for byte");
    let mut vm = Vm::new(&reloaded, registry).unwrap();
    let vargs: Vec<VMObject> = args.iter().map(|l| vm.literal_arg(l)).collect();
    let out = vm.run_main(vargs).unwrap();
    let pure = vm.to_pure(&out).unwrap();
    vm.release(&out);
    assert_eq!(vm.live_bytes(), 0, "storage leaked at exit");
    assert_eq!(vm.mem.live_blocks, 0, "blocks leaked at exit");
    (pure, vm.stats.clone())
}
