//! Matplotlib scripts written next to the CSV outputs. Each script reads
//! its CSV from its own directory and saves a PNG there.

const READER: &str = r#"import csv
import os
import sys

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def read(name):
    with open(os.path.join(HERE, name), newline="") as f:
        rows = csv.reader(f)
        header = next(rows)
        cols = {h: [] for h in header}
        for row in rows:
            for h, v in zip(header, row):
                cols[h].append(float(v))
    return cols
"#;

pub fn trace_script(csv: &str, title: &str) -> String {
    format!(
        r#"{READER}

d = read("{csv}")
t = d["t[s]"]
panels = [
    ("DC link [p.u.]", ["v_dc[pu]"]),
    ("current [p.u.]", ["i_norm[pu]"]),
    ("PCC voltage [p.u.]", ["vg_norm[pu]"]),
    ("power [p.u.]", ["p_g[pu]", "q_g[pu]", "p_star[pu]", "q_star[pu]"]),
    ("shaft speed [p.u.]", sorted(k for k in d if k.startswith("w") and k.endswith("[pu]"))),
    ("torque [p.u.]", ["tau_m[pu]", "tau_shaft[pu]"]),
    ("sync frequency [p.u.]", ["omega_sync[pu]"]),
]
fig, axes = plt.subplots(len(panels), 1, sharex=True, figsize=(9, 2.0 * len(panels)))
for ax, (label, keys) in zip(axes, panels):
    for k in keys:
        ax.plot(t, d[k], label=k)
    ax.set_ylabel(label)
    ax.grid(True, alpha=0.3)
    if len(keys) > 1:
        ax.legend(loc="upper right", fontsize="small")
axes[-1].set_xlabel("t [s]")
fig.suptitle("{title}")
fig.tight_layout()
out = os.path.join(HERE, "trace.png")
fig.savefig(out, dpi=120)
print(out)
if "--show" in sys.argv:
    plt.show()
"#
    )
}

pub fn bode_script(csvs: &[&str]) -> String {
    let list = csvs.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(", ");
    format!(
        r#"{READER}

fig, (gain, phase) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
for name in [{list}]:
    d = read(name)
    f = d["freq[Hz]"]
    gain.semilogx(f, d["gain[dB]"], label=name[:-4])
    phase.semilogx(f, d["phase[deg]"], label=name[:-4])
gain.set_ylabel("|v_dc / i_dc| [dB ohm]")
phase.set_ylabel("phase [deg]")
phase.set_xlabel("f [Hz]")
for ax in (gain, phase):
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
fig.tight_layout()
out = os.path.join(HERE, "bode.png")
fig.savefig(out, dpi=120)
print(out)
if "--show" in sys.argv:
    plt.show()
"#
    )
}
