"""Rebuild 3D geometries for a QM9 sample given as SMILES.

Each molecule is embedded with RDKit (ETKDG + MMFF) and relaxed with
GFN2-xTB through tblite. Output is the plain-text molecule format read by
`alignmol` (count line, key=value metadata line, one `SYMBOL x y z charge` line
per atom, blank line between records).

usage: python build_qm9_subset.py micro_qm9.csv out.txt [limit]

At most the first 1000 successfully built records are written.
"""
import csv
import sys
from multiprocessing import Pool

import numpy as np
from rdkit import Chem
from rdkit.Chem import AllChem
from scipy.optimize import minimize
from tblite.interface import Calculator

BOHR = 1.8897261246257702
KEEP = 1000
PROPS = ["mu", "alpha", "homo", "lumo", "gap", "cv"]


def relax(numbers, coords_ang, charge):
    calc = Calculator("GFN2-xTB", numbers, coords_ang * BOHR, charge=charge)
    calc.set("verbosity", 0)

    def fg(flat):
        calc.update(flat.reshape(-1, 3))
        res = calc.singlepoint()
        return res.get("energy"), res.get("gradient").ravel()

    out = minimize(fg, (coords_ang * BOHR).ravel(), jac=True, method="L-BFGS-B",
                   options={"gtol": 1e-5, "maxiter": 2000})
    return out.x.reshape(-1, 3) / BOHR


def embed(smiles):
    """ETKDG embedding with fallbacks for strained cages."""
    mol = Chem.AddHs(Chem.MolFromSmiles(smiles))
    params = AllChem.ETKDGv3()
    params.randomSeed = 7
    if AllChem.EmbedMolecule(mol, params) == 0:
        return mol
    for seed in range(1, 60):
        params = AllChem.ETKDGv3()
        params.randomSeed = seed
        params.useRandomCoords = True
        params.ignoreSmoothingFailures = True
        params.enforceChirality = False
        if AllChem.EmbedMolecule(mol, params) == 0:
            return mol
    heavy = Chem.MolFromSmiles(smiles)
    for seed in range(1, 200):
        params = AllChem.ETKDGv3()
        params.randomSeed = seed
        params.useRandomCoords = True
        params.ignoreSmoothingFailures = True
        params.enforceChirality = False
        if AllChem.EmbedMolecule(heavy, params) == 0:
            return Chem.AddHs(heavy, addCoords=True)
    return None


def build(row):
    mol = embed(row["smiles"])
    if mol is None:
        return None
    AllChem.MMFFOptimizeMolecule(mol, maxIters=2000)
    numbers = np.array([a.GetAtomicNum() for a in mol.GetAtoms()])
    charges = [a.GetFormalCharge() for a in mol.GetAtoms()]
    xyz = mol.GetConformer().GetPositions()
    try:
        xyz = relax(numbers, xyz, Chem.GetFormalCharge(mol))
    except Exception:
        return None
    syms = [a.GetSymbol() for a in mol.GetAtoms()]
    meta = " ".join([f"id={row['mol_id']}"] + [f"{k}={row[k]}" for k in PROPS])
    lines = [str(len(syms)), meta]
    for s, (x, y, z), q in zip(syms, xyz, charges):
        lines.append(f"{s} {x:.6f} {y:.6f} {z:.6f} {q}")
    return "\n".join(lines)


def main():
    rows = list(csv.DictReader(open(sys.argv[1])))
    if len(sys.argv) > 3:
        rows = rows[: int(sys.argv[3])]
    with Pool() as pool:
        recs = [r for r in pool.map(build, rows, chunksize=4) if r is not None][:KEEP]
    with open(sys.argv[2], "w") as f:
        f.write("\n\n".join(recs) + "\n")
    print(f"{len(recs)}/{len(rows)} molecules written")


if __name__ == "__main__":
    main()
