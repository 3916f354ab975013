"""Build the default network and look at its layers, size and cost."""
from qsegment.model import build_model, layer_table, mac_count
from qsegment.qsm import estimate_int8_size, to_bytes

model = build_model(seed=0)
h, w = 64, 64

print(f"{'idx':>3} {'kind':<18} {'c_in':>5} {'c_out':>5} {'output':<12} {'params':>7}")
for row in layer_table(model, h, w):
    shape = "x".join(map(str, row["out_shape"]))
    print(f"{row['index']:>3} {row['kind']:<18} {row['c_in']:>5} {row['c_out']:>5} {shape:<12} {row['params']:>7}")

print("parameters:", model.parameter_count())
print(f"multiply-accumulates at {h}x{w}:", mac_count(model, h, w))
print("float file:", len(to_bytes(model)), "bytes")
print("int8 file (estimate):", estimate_int8_size(model), "bytes")
