//! Values computed outside this crate and frozen here.

use specgym::generate_inputs;
use specgym::harness::{expected_fuzz_count, fixture_action_space};
use specgym::{build_action_space, ActionSpaceConfig};

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

// Reference: a separate Python implementation of splitmix64 seeding and the
// xorshift64* stream.
#[test]
fn inputs_from_seed_42() {
    let inputs = generate_inputs(42, 20).unwrap();
    assert_eq!(inputs[0].seed, 0xbdd7_3226_2feb_6e95);
    assert_eq!(inputs[0].regs, [0xe8cc_629a_be0a_82d2, 0x4afb_81da_6002_e89a, 0x71b6_cee7_53e9_6bab]);
    assert_eq!(inputs[0].mem[..8], [0xa9, 0x7a, 0x43, 0xbe, 0xa6, 0xd4, 0xa8, 0x04]);
    assert_eq!(inputs[1].seed, 0x28ef_e333_b266_f103);
    assert_eq!(inputs[1].regs, [0xed95_0e8e_168f_58cd, 0xec41_a8cb_34f7_45b5, 0x6a9a_22e5_a09e_37a4]);
    assert_eq!(inputs[19].regs, [0x8ee5_7653_d726_3eee, 0x4204_8dfd_17a2_667c, 0x2276_4004_7c66_db81]);
    let regs = inputs.iter().flat_map(|i| i.regs.iter().flat_map(|r| r.to_le_bytes()));
    let mem = inputs.iter().flat_map(|i| i.mem.iter().copied());
    assert_eq!(fnv1a(regs.chain(mem).collect::<Vec<u8>>()), 0xbf18_f8e0_9c5a_44cf);
}

#[test]
fn default_action_space_layout() {
    let space = build_action_space(&ActionSpaceConfig::default()).unwrap();
    let names: Vec<String> = space.actions().iter().map(|a| a.to_string()).collect();
    assert_eq!(names.len(), 40);
    assert_eq!(names[0], "SBB R0, R0");
    assert_eq!(names[1], "SBB R0, R1");
    assert_eq!(names[3], "SBB R1, R0");
    assert_eq!(names[9], "SBB R0, [BASE+R0]");
    assert_eq!(names[18], "SBB [BASE+R0], R0");
    assert_eq!(names[27], "IMUL R0, R0");
    assert_eq!(names[35], "IMUL R2, R2");
    assert_eq!(names[36..], ["JNS -2", "JNS +2", "JMP -2", "JMP +2"]);
}

#[test]
fn fuzz_formula() {
    assert_eq!(expected_fuzz_count(2, 3, 2), Some(2.0));
    assert_eq!(expected_fuzz_count(6, 4, 2), Some(72.0));
    assert_eq!(build_action_space(&fixture_action_space()).unwrap().size(), 6);
}
