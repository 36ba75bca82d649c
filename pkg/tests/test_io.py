import json

import numpy as np
import pytest

from nmrprofile.errors import InvalidArgumentError, LibraryValidationError
from nmrprofile.io import (library_to_dict, load_library, read_spectrum_csv, save_library,
                           write_spectrum_csv)
from nmrprofile.model import Spectrum
from nmrprofile.synth import demo_library


@pytest.mark.parametrize("name", ["mix15", "csf48"])
def test_library_round_trip(tmp_path, name):
    lib = demo_library(name)
    path = tmp_path / "lib.json"
    save_library(lib, path)
    back = load_library(path)
    assert back == lib
    assert library_to_dict(back) == library_to_dict(lib)


def test_csf48_statistics():
    stats = demo_library("csf48").stats()
    assert (stats["compounds"], stats["clusters"], stats["peaks"]) == (48, 180, 946)


def test_inverted_window_rejected_with_every_violation(tmp_path):
    doc = library_to_dict(demo_library("mix15"))
    doc["compounds"][1]["clusters"][0]["window_ppm"] = [3.0, 2.0]
    doc["compounds"][2]["clusters"][0]["peaks"][0]["widthParam_ppm2"] = -1.0
    doc["compounds"][3]["id"] = doc["compounds"][4]["id"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(LibraryValidationError) as err:
        load_library(path)
    msgs = err.value.errors
    assert any("inverted" in m for m in msgs)
    assert any("widthParam" in m for m in msgs)
    assert any("duplicate compound" in m for m in msgs)


def test_spectrum_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    spec = Spectrum(-1.0, 0.0002, rng.normal(size=1000))
    path = tmp_path / "s.csv"
    write_spectrum_csv(spec, path)
    back = read_spectrum_csv(path)
    assert back.same_grid(spec)
    np.testing.assert_array_equal(back.intensities, spec.intensities)


def test_spectrum_csv_descending_and_nonuniform(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("ppm,intensity\n2.0,1\n1.5,2\n1.0,3\n")
    s = read_spectrum_csv(path)
    assert s.start == 1.0 and s.step == 0.5
    np.testing.assert_array_equal(s.intensities, [3, 2, 1])
    path.write_text("ppm,intensity\n1.0,1\n1.5,2\n2.1,3\n")
    with pytest.raises(InvalidArgumentError):
        read_spectrum_csv(path)
