# presentation package

