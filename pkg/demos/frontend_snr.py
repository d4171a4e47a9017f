"""Simulate one lab record and compare what each front-end does to it.

Beams are linear, so their keyword-to-noise ratio is measured by running the
keyword and the noise through separately.  The canceller adapts on its input,
so it is summarised by the noise power it removes when fed the noise alone.
"""

import sys

import numpy as np

from mkws import synth
from mkws.array_sim import ArrayGeometry, LabDataset, LabProtocol, MultichannelClip, SourceSpec, propagate
from mkws.frontend import BeamSet, align_anc, anc_process, beamform


def main(index=17, seed=0):
    geom = ArrayGeometry.default()
    ds = LabDataset(geom, LabProtocol(records=24), seed=seed)
    spec, clip = ds.spec(index), ds[index]
    s0, s1 = clip.keyword_span
    kw_wave = synth.synth_keyword(spec["voice"], spec["keyword_seed"], geom.sample_rate)
    kw = propagate(geom, SourceSpec(spec["keyword_azimuth_deg"], kw_wave, spec["keyword_level_db"]),
                   clip.n_samples, s0).channels
    noise = clip.channels - kw
    print(f"record {index}: {spec['noise_type']} noise at {spec['noise_azimuth_deg']:.0f} deg, "
          f"keyword at {spec['keyword_azimuth_deg']:.0f} deg, nominal SNR {spec['snr_db']:+.0f} dB")

    def snr(k, n):
        return 10 * np.log10(np.var(k[s0:s1]) / np.var(n[s0:s1]))

    beams = BeamSet(geom)
    print(f"  omni   {snr(kw[0], noise[0]):+6.1f} dB")
    for tag, k, n in zip(beams.tags, beamform(MultichannelClip(kw), beams), beamform(MultichannelClip(noise), beams)):
        print(f"  {tag} {snr(k, n):+6.1f} dB")
    cleaned = align_anc(anc_process(MultichannelClip(noise)).signal)
    late = slice(2 * geom.sample_rate, clip.n_samples - 200)
    print(f"  anc removes {10 * np.log10(np.var(noise[0][late]) / np.var(cleaned[late])):.1f} dB of noise "
          f"after the first two seconds")


if __name__ == "__main__":
    main(*map(int, sys.argv[1:]))
