import numpy as np
import pytest

from sace.data import Dataset, MissingState, PatientRecord


def make_record(
    id="r1",
    z=0,
    t_z=None,
    s=0,
    t_s=9.0,
    m=None,
    y=None,
    covariates=(0.0,),
    t_o=18.0,
):
    """Record factory with the censoring rule filled in by default."""
    if m is None:
        if s == 0:
            m = MissingState.UNDEFINED
        else:
            m = MissingState.OBSERVED if y is not None else MissingState.MISSING
    if t_z is None:
        t_z = min(t_s, t_o) if z == 0 else min(t_s, t_o) / 2
    return PatientRecord(
        id=id,
        z=z,
        t_z=t_z,
        s=s,
        t_s=t_s,
        m=m,
        y=y,
        covariates=np.asarray(covariates, dtype=float),
    )


@pytest.fixture
def six_group_dataset():
    """One record in each observed group, single covariate."""
    records = (
        make_record("a", z=1, t_z=6.0, s=1, t_s=25.0, y=24.0, covariates=(0.5,)),
        make_record("b", z=1, t_z=6.0, s=1, t_s=25.0, covariates=(-0.2,)),
        make_record("c", z=1, t_z=6.0, s=0, t_s=10.0, covariates=(1.0,)),
        make_record("d", z=0, t_z=18.0, s=1, t_s=30.0, y=22.0, covariates=(0.1,)),
        make_record("e", z=0, t_z=18.0, s=1, t_s=30.0, covariates=(-1.0,)),
        make_record("f", z=0, t_z=9.0, s=0, t_s=9.0, covariates=(0.3,)),
    )
    return Dataset(records, t_o=18.0, covariate_names=("x1",))
