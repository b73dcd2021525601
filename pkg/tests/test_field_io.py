import numpy as np
import pytest
from mini_fbp.exceptions import FieldFormatError
from mini_fbp.field_io import (
    MAGIC,
    dumps_field,
    loads_field,
    read_field,
    sha256_of,
    write_csv,
    write_field,
)
from mini_fbp.grid import Grid, ScalarFieldGrid


@pytest.fixture
def field():
    grid = Grid(dim=2, h=1 / 16, origin=(-0.5, -0.25), dims=(8, 6))
    values = np.random.default_rng(1).uniform(0.0, 1.0, grid.shape)
    return ScalarFieldGrid(grid, values)


def describe_fbgrid():

    def round_trips_bitwise(field, tmp_path):
        path = tmp_path / "u.fbgrid"
        digest = write_field(path, field)
        back = read_field(path)
        assert back.grid == field.grid
        assert back.values.tobytes() == field.values.tobytes()
        assert digest == sha256_of(path)

    def starts_with_the_magic(field):
        data = dumps_field(field)
        assert data.startswith(MAGIC)
        assert data[len(MAGIC)] == 2

    def rejects_foreign_files(field):
        with pytest.raises(FieldFormatError):
            loads_field(b"NOTAGRID" + dumps_field(field)[8:])

    def rejects_truncated_payloads(field):
        with pytest.raises(FieldFormatError):
            loads_field(dumps_field(field)[:-8])

    def rejects_unsupported_dimensions(field):
        data = bytearray(dumps_field(field))
        data[len(MAGIC)] = 4
        with pytest.raises(FieldFormatError):
            loads_field(bytes(data))


def describe_write_csv():

    def writes_header_then_rows(tmp_path):
        path = tmp_path / "report.csv"
        write_csv(path, ("r", "W"), [(0.25, 1.5), (0.125, 1.25)])
        assert path.read_text().splitlines() == ["r,W", "0.25,1.5", "0.125,1.25"]
