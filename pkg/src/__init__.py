# src package

